#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/rng.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

enum class Activation { Tanh, Relu };

inline std::string activation_name(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ContractError("unknown activation '" + s + "'");
}

// Layer widths input -> hidden... -> output, with the activation applied
// between layers and never after the last.
struct MlpSpec {
    std::vector<int> layer_dims;
    Activation activation = Activation::Tanh;

    void validate() const {
        if (layer_dims.size() < 2) throw ContractError("MlpSpec: needs at least 2 layer dims");
        for (int d : layer_dims) {
            if (d < 1) throw ContractError("MlpSpec: non-positive layer dim");
        }
    }

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    int layer_count() const { return static_cast<int>(layer_dims.size()) - 1; }
};

struct Mlp {
    MlpSpec spec;
    std::vector<Tensor2> weights; // layer l: dims[l] x dims[l+1]
    std::vector<Tensor2> biases;  // layer l: 1 x dims[l+1]
};

// Glorot-uniform weights, zero biases; draw order is fixed so the same seed
// stream always yields the same parameters.
inline Mlp init_mlp(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    Mlp m;
    m.spec = spec;
    for (int l = 0; l < spec.layer_count(); ++l) {
        const int fan_in = spec.layer_dims[l];
        const int fan_out = spec.layer_dims[l + 1];
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor2 w(fan_in, fan_out);
        for (std::size_t f = 0; f < w.size(); ++f) w.at(f) = rng.uniform(-a, a);
        m.weights.push_back(std::move(w));
        m.biases.emplace_back(1, fan_out, 0.0);
    }
    return m;
}

// Node handles for one registered MLP.
struct MlpNodes {
    std::vector<NodeId> weights;
    std::vector<NodeId> biases;
};

inline MlpNodes register_mlp(DiffGraph& g, const Mlp& m, bool trainable) {
    MlpNodes n;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        n.weights.push_back(g.leaf(m.weights[l], trainable));
        n.biases.push_back(g.leaf(m.biases[l], trainable));
    }
    return n;
}

// Update bindings: the model tensor each registered node mirrors.
inline void collect_params(const MlpNodes& nodes, Mlp& m,
                           std::vector<std::pair<Tensor2*, NodeId>>& out) {
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        out.emplace_back(&m.weights[l], nodes.weights[l]);
        out.emplace_back(&m.biases[l], nodes.biases[l]);
    }
}

namespace detail {

inline NodeId affine(DiffGraph& g, NodeId x, NodeId w, NodeId b) {
    const int rows = g.value(x).rows();
    const NodeId ones = g.constant(Tensor2(rows, 1, 1.0));
    return g.add(g.matmul(x, w), g.matmul(ones, b));
}

inline NodeId activate(DiffGraph& g, Activation a, NodeId x) {
    return a == Activation::Tanh ? g.tanh(x) : g.relu(x);
}

} // namespace detail

inline NodeId forward_mlp(DiffGraph& g, const MlpSpec& spec, const MlpNodes& n, NodeId x) {
    if (g.value(x).cols() != spec.input_dim()) {
        throw ShapeError("mlp forward: input " + g.value(x).shape_str() + " does not match spec input dim " +
                         std::to_string(spec.input_dim()));
    }
    NodeId h = x;
    for (int l = 0; l < spec.layer_count(); ++l) {
        h = detail::affine(g, h, n.weights[l], n.biases[l]);
        if (l + 1 < spec.layer_count()) h = detail::activate(g, spec.activation, h);
    }
    return h;
}

struct HeadForward {
    NodeId embedding; // penultimate-layer activations, width m
    NodeId output;    // final linear layer
};

// Runs a head MLP and exposes both the embedding (everything up to the
// penultimate layer, activation included) and the final-layer output.
inline HeadForward forward_head(DiffGraph& g, const MlpSpec& spec, const MlpNodes& n, NodeId x) {
    if (spec.layer_count() < 2) throw ContractError("head needs at least 2 layers (embedding + output)");
    NodeId h = x;
    for (int l = 0; l + 1 < spec.layer_count(); ++l) {
        h = detail::activate(g, spec.activation, detail::affine(g, h, n.weights[l], n.biases[l]));
    }
    const int last = spec.layer_count() - 1;
    return {h, detail::affine(g, h, n.weights[last], n.biases[last])};
}

// --- model bundles -----------------------------------------------------------

// Prevalent + privileged backbones feeding a concatenation fusion head.
struct TeacherModel {
    Mlp prevalent_backbone;
    Mlp privileged_backbone;
    Mlp fusion_head;
    int embed_dim = 0;

    void validate() const {
        if (fusion_head.spec.input_dim() !=
            prevalent_backbone.spec.output_dim() + privileged_backbone.spec.output_dim()) {
            throw ContractError("teacher: fusion input dim must equal the sum of backbone output dims");
        }
        if (fusion_head.spec.layer_dims[fusion_head.spec.layer_dims.size() - 2] != embed_dim) {
            throw ContractError("teacher: penultimate fusion width must equal embed_dim");
        }
    }
};

// Encoder-decoder hallucinator from raw prevalent features to privileged
// embeddings; trained during the teacher stage and frozen afterwards.
struct TNet {
    Mlp encoder;
    Mlp decoder;
    bool frozen = false;

    void validate(int prevalent_input_dim, int privileged_embed_dim) const {
        if (encoder.spec.input_dim() != prevalent_input_dim) {
            throw ContractError("tnet: encoder input dim must equal the prevalent feature dim");
        }
        if (decoder.spec.output_dim() != privileged_embed_dim) {
            throw ContractError("tnet: decoder output dim must equal the privileged embed dim");
        }
        if (encoder.spec.output_dim() != decoder.spec.input_dim()) {
            throw ContractError("tnet: encoder output dim must equal decoder input dim");
        }
    }
};

// Prevalent backbone plus frozen T-Net feeding the student fusion head.
struct StudentModel {
    Mlp prevalent_backbone;
    TNet tnet;
    Mlp fusion_head;
    int embed_dim = 0;
};

// Lower-bound architecture: no privileged branch at all.
struct PrevalentOnlyModel {
    Mlp prevalent_backbone;
    Mlp fusion_head;
    int embed_dim = 0;
};

// Widths shared by every stage; the desk-scale stand-in for the paper-scale
// video/audio backbones.
struct ArchSpec {
    std::vector<int> backbone_hidden{32, 32};
    int prevalent_embed = 16;
    int privileged_embed = 16;
    std::vector<int> tnet_encoder_hidden{32};
    int tnet_code = 8;
    std::vector<int> tnet_decoder_hidden{32};
    std::vector<int> fusion_hidden{};
    int embed_dim = 16;
    Activation activation = Activation::Tanh;

    MlpSpec backbone_spec(int input_dim, int out_dim) const {
        MlpSpec s;
        s.layer_dims.push_back(input_dim);
        for (int h : backbone_hidden) s.layer_dims.push_back(h);
        s.layer_dims.push_back(out_dim);
        s.activation = activation;
        return s;
    }

    MlpSpec fusion_spec(int input_dim, int output_dim) const {
        MlpSpec s;
        s.layer_dims.push_back(input_dim);
        for (int h : fusion_hidden) s.layer_dims.push_back(h);
        s.layer_dims.push_back(embed_dim);
        s.layer_dims.push_back(output_dim);
        s.activation = activation;
        return s;
    }
};

inline TeacherModel make_teacher(const ArchSpec& arch, int d_prevalent, int d_privileged, int output_dim,
                                 Rng& rng) {
    TeacherModel t;
    t.prevalent_backbone = init_mlp(arch.backbone_spec(d_prevalent, arch.prevalent_embed), rng);
    t.privileged_backbone = init_mlp(arch.backbone_spec(d_privileged, arch.privileged_embed), rng);
    t.fusion_head = init_mlp(arch.fusion_spec(arch.prevalent_embed + arch.privileged_embed, output_dim), rng);
    t.embed_dim = arch.embed_dim;
    t.validate();
    return t;
}

inline TNet make_tnet(const ArchSpec& arch, int d_prevalent, Rng& rng) {
    TNet t;
    MlpSpec enc;
    enc.layer_dims.push_back(d_prevalent);
    for (int h : arch.tnet_encoder_hidden) enc.layer_dims.push_back(h);
    enc.layer_dims.push_back(arch.tnet_code);
    enc.activation = arch.activation;
    MlpSpec dec;
    dec.layer_dims.push_back(arch.tnet_code);
    for (int h : arch.tnet_decoder_hidden) dec.layer_dims.push_back(h);
    dec.layer_dims.push_back(arch.privileged_embed);
    dec.activation = arch.activation;
    t.encoder = init_mlp(enc, rng);
    t.decoder = init_mlp(dec, rng);
    t.frozen = false;
    t.validate(d_prevalent, arch.privileged_embed);
    return t;
}

inline StudentModel make_student(const ArchSpec& arch, int d_prevalent, TNet tnet, int output_dim, Rng& rng) {
    StudentModel s;
    s.prevalent_backbone = init_mlp(arch.backbone_spec(d_prevalent, arch.prevalent_embed), rng);
    s.tnet = std::move(tnet);
    s.tnet.frozen = true;
    s.fusion_head = init_mlp(arch.fusion_spec(arch.prevalent_embed + arch.privileged_embed, output_dim), rng);
    s.embed_dim = arch.embed_dim;
    return s;
}

inline PrevalentOnlyModel make_prevalent_only(const ArchSpec& arch, int d_prevalent, int output_dim,
                                              Rng& rng) {
    PrevalentOnlyModel p;
    p.prevalent_backbone = init_mlp(arch.backbone_spec(d_prevalent, arch.prevalent_embed), rng);
    p.fusion_head = init_mlp(arch.fusion_spec(arch.prevalent_embed, output_dim), rng);
    p.embed_dim = arch.embed_dim;
    return p;
}

// --- forwards ----------------------------------------------------------------

struct TeacherNodes {
    MlpNodes prevalent;
    MlpNodes privileged;
    MlpNodes fusion;
};

inline TeacherNodes register_teacher(DiffGraph& g, const TeacherModel& t, bool trainable) {
    return {register_mlp(g, t.prevalent_backbone, trainable),
            register_mlp(g, t.privileged_backbone, trainable),
            register_mlp(g, t.fusion_head, trainable)};
}

struct ModelForward {
    NodeId embedding;
    NodeId output;
    NodeId privileged_embedding = -1; // teacher only: T-Net regression target
};

inline ModelForward forward_teacher(DiffGraph& g, const TeacherModel& t, const TeacherNodes& n,
                                    NodeId prevalent_x, NodeId privileged_x) {
    const NodeId ep = forward_mlp(g, t.prevalent_backbone.spec, n.prevalent, prevalent_x);
    const NodeId eq = forward_mlp(g, t.privileged_backbone.spec, n.privileged, privileged_x);
    const HeadForward head = forward_head(g, t.fusion_head.spec, n.fusion, g.concat_cols(ep, eq));
    return {head.embedding, head.output, eq};
}

struct TNetNodes {
    MlpNodes encoder;
    MlpNodes decoder;
};

inline TNetNodes register_tnet(DiffGraph& g, const TNet& t, bool trainable) {
    return {register_mlp(g, t.encoder, trainable), register_mlp(g, t.decoder, trainable)};
}

inline NodeId forward_tnet(DiffGraph& g, const TNet& t, const TNetNodes& n, NodeId prevalent_x) {
    return forward_mlp(g, t.decoder.spec, n.decoder, forward_mlp(g, t.encoder.spec, n.encoder, prevalent_x));
}

struct StudentNodes {
    MlpNodes prevalent;
    TNetNodes tnet; // registered frozen
    MlpNodes fusion;
};

inline StudentNodes register_student(DiffGraph& g, const StudentModel& s, bool trainable) {
    return {register_mlp(g, s.prevalent_backbone, trainable), register_tnet(g, s.tnet, false),
            register_mlp(g, s.fusion_head, trainable)};
}

inline ModelForward forward_student(DiffGraph& g, const StudentModel& s, const StudentNodes& n,
                                    NodeId prevalent_x) {
    const NodeId ep = forward_mlp(g, s.prevalent_backbone.spec, n.prevalent, prevalent_x);
    const NodeId hq = forward_tnet(g, s.tnet, n.tnet, prevalent_x);
    const HeadForward head = forward_head(g, s.fusion_head.spec, n.fusion, g.concat_cols(ep, hq));
    return {head.embedding, head.output, hq};
}

struct PrevalentOnlyNodes {
    MlpNodes prevalent;
    MlpNodes fusion;
};

inline PrevalentOnlyNodes register_prevalent_only(DiffGraph& g, const PrevalentOnlyModel& p, bool trainable) {
    return {register_mlp(g, p.prevalent_backbone, trainable), register_mlp(g, p.fusion_head, trainable)};
}

inline ModelForward forward_prevalent_only(DiffGraph& g, const PrevalentOnlyModel& p,
                                           const PrevalentOnlyNodes& n, NodeId prevalent_x) {
    const NodeId ep = forward_mlp(g, p.prevalent_backbone.spec, n.prevalent, prevalent_x);
    const HeadForward head = forward_head(g, p.fusion_head.spec, n.fusion, ep);
    return {head.embedding, head.output};
}

// Value-only forwards for evaluation; build a throwaway graph of constants.

struct ForwardValues {
    Tensor2 embedding;
    Tensor2 output;
};

inline ForwardValues forward_teacher_value(const TeacherModel& t, const Tensor2& prevalent,
                                           const Tensor2& privileged) {
    DiffGraph g;
    const TeacherNodes n = register_teacher(g, t, false);
    const ModelForward f = forward_teacher(g, t, n, g.constant(prevalent), g.constant(privileged));
    return {g.value(f.embedding), g.value(f.output)};
}

inline ForwardValues forward_student_value(const StudentModel& s, const Tensor2& prevalent) {
    DiffGraph g;
    const StudentNodes n = register_student(g, s, false);
    const ModelForward f = forward_student(g, s, n, g.constant(prevalent));
    return {g.value(f.embedding), g.value(f.output)};
}

inline ForwardValues forward_prevalent_only_value(const PrevalentOnlyModel& p, const Tensor2& prevalent) {
    DiffGraph g;
    const PrevalentOnlyNodes n = register_prevalent_only(g, p, false);
    const ModelForward f = forward_prevalent_only(g, p, n, g.constant(prevalent));
    return {g.value(f.embedding), g.value(f.output)};
}

inline Tensor2 forward_tnet_value(const TNet& t, const Tensor2& prevalent) {
    DiffGraph g;
    const TNetNodes n = register_tnet(g, t, false);
    return g.value(forward_tnet(g, t, n, g.constant(prevalent)));
}

// --- checkpoints ---------------------------------------------------------------
// JSON with exact-round-trip doubles: spec dims plus parameter arrays in
// declaration order. Reload is bit-exact.

namespace detail {

inline nlohmann::json mlp_to_json(const Mlp& m) {
    nlohmann::json j;
    j["layer_dims"] = m.spec.layer_dims;
    j["activation"] = activation_name(m.spec.activation);
    nlohmann::json weights = nlohmann::json::array();
    nlohmann::json biases = nlohmann::json::array();
    for (const auto& w : m.weights) weights.push_back(w.data());
    for (const auto& b : m.biases) biases.push_back(b.data());
    j["weights"] = std::move(weights);
    j["biases"] = std::move(biases);
    return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
    Mlp m;
    m.spec.layer_dims = j.at("layer_dims").get<std::vector<int>>();
    m.spec.activation = activation_from_name(j.at("activation").get<std::string>());
    m.spec.validate();
    for (int l = 0; l < m.spec.layer_count(); ++l) {
        const int fan_in = m.spec.layer_dims[l];
        const int fan_out = m.spec.layer_dims[l + 1];
        m.weights.emplace_back(fan_in, fan_out, j.at("weights").at(l).get<std::vector<double>>());
        m.biases.emplace_back(1, fan_out, j.at("biases").at(l).get<std::vector<double>>());
    }
    return m;
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("checkpoint parse error: ") + e.what());
    }
    return j;
}

} // namespace detail

inline void save_teacher_checkpoint(const std::string& path, const TeacherModel& t, const TNet& tnet) {
    nlohmann::json j;
    j["format"] = "pkdot-checkpoint-v1";
    j["kind"] = "teacher";
    j["embed_dim"] = t.embed_dim;
    j["teacher"] = {{"prevalent_backbone", detail::mlp_to_json(t.prevalent_backbone)},
                    {"privileged_backbone", detail::mlp_to_json(t.privileged_backbone)},
                    {"fusion_head", detail::mlp_to_json(t.fusion_head)}};
    j["tnet"] = {{"encoder", detail::mlp_to_json(tnet.encoder)},
                 {"decoder", detail::mlp_to_json(tnet.decoder)},
                 {"frozen", tnet.frozen}};
    detail::write_json_file(j, path);
}

inline std::pair<TeacherModel, TNet> load_teacher_checkpoint(const std::string& path) {
    const nlohmann::json j = detail::read_json_file(path);
    if (j.value("kind", "") != "teacher") throw ParseError("not a teacher checkpoint: " + path);
    TeacherModel t;
    t.prevalent_backbone = detail::mlp_from_json(j.at("teacher").at("prevalent_backbone"));
    t.privileged_backbone = detail::mlp_from_json(j.at("teacher").at("privileged_backbone"));
    t.fusion_head = detail::mlp_from_json(j.at("teacher").at("fusion_head"));
    t.embed_dim = j.at("embed_dim").get<int>();
    t.validate();
    TNet tn;
    tn.encoder = detail::mlp_from_json(j.at("tnet").at("encoder"));
    tn.decoder = detail::mlp_from_json(j.at("tnet").at("decoder"));
    tn.frozen = j.at("tnet").at("frozen").get<bool>();
    return {std::move(t), std::move(tn)};
}

inline void save_student_checkpoint(const std::string& path, const StudentModel& s) {
    nlohmann::json j;
    j["format"] = "pkdot-checkpoint-v1";
    j["kind"] = "student";
    j["embed_dim"] = s.embed_dim;
    j["student"] = {{"prevalent_backbone", detail::mlp_to_json(s.prevalent_backbone)},
                    {"fusion_head", detail::mlp_to_json(s.fusion_head)}};
    j["tnet"] = {{"encoder", detail::mlp_to_json(s.tnet.encoder)},
                 {"decoder", detail::mlp_to_json(s.tnet.decoder)},
                 {"frozen", s.tnet.frozen}};
    detail::write_json_file(j, path);
}

inline StudentModel load_student_checkpoint(const std::string& path) {
    const nlohmann::json j = detail::read_json_file(path);
    if (j.value("kind", "") != "student") throw ParseError("not a student checkpoint: " + path);
    StudentModel s;
    s.prevalent_backbone = detail::mlp_from_json(j.at("student").at("prevalent_backbone"));
    s.fusion_head = detail::mlp_from_json(j.at("student").at("fusion_head"));
    s.tnet.encoder = detail::mlp_from_json(j.at("tnet").at("encoder"));
    s.tnet.decoder = detail::mlp_from_json(j.at("tnet").at("decoder"));
    s.tnet.frozen = j.at("tnet").at("frozen").get<bool>();
    s.embed_dim = j.at("embed_dim").get<int>();
    return s;
}

inline void save_prevalent_only_checkpoint(const std::string& path, const PrevalentOnlyModel& p) {
    nlohmann::json j;
    j["format"] = "pkdot-checkpoint-v1";
    j["kind"] = "prevalent_only";
    j["embed_dim"] = p.embed_dim;
    j["model"] = {{"prevalent_backbone", detail::mlp_to_json(p.prevalent_backbone)},
                  {"fusion_head", detail::mlp_to_json(p.fusion_head)}};
    detail::write_json_file(j, path);
}

inline PrevalentOnlyModel load_prevalent_only_checkpoint(const std::string& path) {
    const nlohmann::json j = detail::read_json_file(path);
    if (j.value("kind", "") != "prevalent_only") throw ParseError("not a prevalent-only checkpoint: " + path);
    PrevalentOnlyModel p;
    p.prevalent_backbone = detail::mlp_from_json(j.at("model").at("prevalent_backbone"));
    p.fusion_head = detail::mlp_from_json(j.at("model").at("fusion_head"));
    p.embed_dim = j.at("embed_dim").get<int>();
    return p;
}

} // namespace pkdot
