#include <doctest.h>

#include <cmath>

#include "pkdot/trainer.hpp"

using namespace pkdot;

namespace {

SyntheticSpec clean_two_class(int n = 400) {
    SyntheticSpec s;
    s.task = TaskKind::Classification;
    s.classes = 2;
    s.n_samples = n;
    s.latent_dim = 4;
    s.d_prevalent = 8;
    s.d_privileged = 8;
    s.noise_prevalent = 0.0;
    s.noise_privileged = 0.0;
    s.seed = 3;
    return s;
}

SyntheticSpec small_sew(int n = 300) {
    SyntheticSpec s = SyntheticSpec::default_sew();
    s.n_samples = n;
    s.seed = 11;
    return s;
}

ArchSpec small_arch() {
    ArchSpec a;
    a.backbone_hidden = {16};
    a.prevalent_embed = 8;
    a.privileged_embed = 8;
    a.tnet_encoder_hidden = {16};
    a.tnet_code = 4;
    a.tnet_decoder_hidden = {16};
    a.embed_dim = 8;
    return a;
}

TrainConfig teacher_cfg(int epochs = 20, std::uint64_t seed = 1) {
    TrainConfig c;
    c.stage = Stage::Teacher;
    c.epochs = epochs;
    c.batch_size = 32;
    c.learning_rate = 0.05;
    c.seed = seed;
    c.arch = small_arch();
    return c;
}

TrainConfig student_cfg(Stage stage, int epochs = 8, std::uint64_t seed = 1) {
    TrainConfig c;
    c.stage = stage;
    c.epochs = epochs;
    c.batch_size = 32;
    c.learning_rate = 0.05;
    c.lambda = 0.4;
    c.k_anchors = 8;
    c.sinkhorn = SinkhornConfig{0.1, 20000, 1e-6};
    c.seed = seed;
    c.arch = small_arch();
    return c;
}

double param_checksum(const Mlp& m) {
    double acc = 0.0;
    for (const auto& w : m.weights)
        for (double v : w.data()) acc += v * 1e6 - std::floor(v * 1e6);
    for (const auto& b : m.biases)
        for (double v : b.data()) acc += v;
    return acc;
}

} // namespace

TEST_CASE("teacher reaches high accuracy on a clean two-class task") {
    const Dataset ds = generate(clean_two_class());
    const TeacherTrainResult r = train_teacher(ds, teacher_cfg(30));
    CHECK(r.best_val.metrics[0] >= 0.95);
    CHECK(r.tnet.frozen);
    CHECK(r.log.rows.size() == 60); // one train + one val row per epoch
}

TEST_CASE("zero epochs return the initial model with an empty log") {
    const Dataset ds = generate(clean_two_class(100));
    TrainConfig cfg = teacher_cfg(0);
    const TeacherTrainResult r = train_teacher(ds, cfg);
    CHECK(r.log.rows.empty());
    CHECK(r.best_epoch == 0);

    Rng ref = Rng::stream(cfg.seed, "teacher_init");
    const TeacherModel fresh = make_teacher(cfg.arch, 8, 8, 2, ref);
    CHECK(r.teacher.fusion_head.weights[0] == fresh.fusion_head.weights[0]);
}

TEST_CASE("training is deterministic: same seed, same metrics bytes") {
    const Dataset ds = generate(clean_two_class(200));
    const TeacherTrainResult a = train_teacher(ds, teacher_cfg(5, 42));
    const TeacherTrainResult b = train_teacher(ds, teacher_cfg(5, 42));
    CHECK(a.log.to_csv() == b.log.to_csv());
    CHECK(a.teacher.fusion_head.weights[0] == b.teacher.fusion_head.weights[0]);

    const TeacherTrainResult c = train_teacher(ds, teacher_cfg(5, 43));
    CHECK(a.log.to_csv() != c.log.to_csv());
}

TEST_CASE("tnet hallucination improves over the untrained tnet") {
    const Dataset ds = generate(clean_two_class());
    const TrainConfig cfg = teacher_cfg(25);

    Rng fresh_rng = Rng::stream(cfg.seed, "tnet_init");
    const TNet untrained = make_tnet(cfg.arch, 8, fresh_rng);
    const TeacherTrainResult r = train_teacher(ds, cfg);

    const std::vector<int> val = ds.indices_of(Split::Val);
    const Tensor2 prev = ds.gather(Modality::Prevalent, val);
    const Tensor2 priv = ds.gather(Modality::Privileged, val);

    // target: the trained teacher's privileged embeddings on held-out data
    DiffGraph g;
    const TeacherNodes tn = register_teacher(g, r.teacher, false);
    const ModelForward f = forward_teacher(g, r.teacher, tn, g.constant(prev), g.constant(priv));
    const Tensor2 target = g.value(f.privileged_embedding);

    auto mse_of = [&](const TNet& t) {
        const Tensor2 h = forward_tnet_value(t, prev);
        double acc = 0.0;
        for (std::size_t i = 0; i < h.size(); ++i) acc += (h.at(i) - target.at(i)) * (h.at(i) - target.at(i));
        return acc / static_cast<double>(h.size());
    };
    CHECK(mse_of(r.tnet) < mse_of(untrained));
}

TEST_CASE("student stages require a teacher") {
    const Dataset ds = generate(small_sew(100));
    CHECK_THROWS_AS(train_student(ds, nullptr, nullptr, student_cfg(Stage::StudentPkdot)), ContractError);
    CHECK_NOTHROW(train_student(ds, nullptr, nullptr, student_cfg(Stage::PrevalentOnly, 1)));
}

TEST_CASE("lambda=0 pkdot matches the architecture-matched task-only baseline exactly") {
    const Dataset ds = generate(small_sew(200));
    const TeacherTrainResult t = train_teacher(ds, teacher_cfg(6, 5));

    TrainConfig a = student_cfg(Stage::StudentPkdot, 6, 9);
    a.lambda = 0.0;
    TrainConfig b = student_cfg(Stage::StudentPointwise, 6, 9);
    b.pointwise_kind = PointwiseKind::Mse;
    b.lambda = 0.0;

    const StudentTrainResult ra = train_student(ds, &t.teacher, &t.tnet, a);
    const StudentTrainResult rb = train_student(ds, &t.teacher, &t.tnet, b);

    REQUIRE(ra.log.rows.size() == rb.log.rows.size());
    for (std::size_t i = 0; i < ra.log.rows.size(); ++i) {
        CHECK(std::abs(ra.log.rows[i].task_loss - rb.log.rows[i].task_loss) <= 1e-12);
        CHECK(ra.log.rows[i].metrics == rb.log.rows[i].metrics);
    }
    // identical parameter trajectories, although the OT branch ran
    CHECK(ra.student->prevalent_backbone.weights[0] == rb.student->prevalent_backbone.weights[0]);
    CHECK(ra.student->fusion_head.weights[1] == rb.student->fusion_head.weights[1]);
    CHECK(ra.log.rows[0].ot_loss > 0.0); // the branch was computed, just unweighted
}

TEST_CASE("teacher and tnet are never mutated by student training") {
    const Dataset ds = generate(small_sew(200));
    const TeacherTrainResult t = train_teacher(ds, teacher_cfg(5, 2));
    const double teacher_sum = param_checksum(t.teacher.fusion_head) +
                               param_checksum(t.teacher.prevalent_backbone) +
                               param_checksum(t.teacher.privileged_backbone);
    const Tensor2 enc0 = t.tnet.encoder.weights[0];
    const Tensor2 dec0 = t.tnet.decoder.weights[0];

    const StudentTrainResult r = train_student(ds, &t.teacher, &t.tnet, student_cfg(Stage::StudentPkdot, 4));
    CHECK(param_checksum(t.teacher.fusion_head) + param_checksum(t.teacher.prevalent_backbone) +
              param_checksum(t.teacher.privileged_backbone) == teacher_sum);
    // the student's frozen copy is bit-identical to the post-teacher-stage values
    CHECK(r.student->tnet.encoder.weights[0] == enc0);
    CHECK(r.student->tnet.decoder.weights[0] == dec0);
    CHECK(r.student->tnet.frozen);
}

TEST_CASE("pkdot student logs anchors and sinkhorn diagnostics") {
    const Dataset ds = generate(small_sew(200));
    const TeacherTrainResult t = train_teacher(ds, teacher_cfg(5, 2));
    TrainConfig cfg = student_cfg(Stage::StudentPkdot, 3);
    cfg.snapshot_every = 1;
    cfg.snapshot_dir = "/tmp/pkdot_snaps";
    const StudentTrainResult r = train_student(ds, &t.teacher, &t.tnet, cfg);

    REQUIRE(r.last_anchor_indices.size() == 8);
    CHECK(std::is_sorted(r.last_anchor_indices.begin(), r.last_anchor_indices.end()));
    for (const MetricsRow& row : r.log.rows) {
        CHECK(row.sinkhorn_converged_frac == 1.0);
        CHECK(row.frobenius_gap > 0.0);
    }
    CHECK(std::filesystem::exists("/tmp/pkdot_snaps/epoch_1_teacher.csv"));
    CHECK(std::filesystem::exists("/tmp/pkdot_snaps/epoch_3_student.csv"));
    std::filesystem::remove_all("/tmp/pkdot_snaps");
}

TEST_CASE("pointwise stages train without error and log the kd loss") {
    const Dataset ds = generate(small_sew(200));
    const TeacherTrainResult t = train_teacher(ds, teacher_cfg(5, 2));
    for (PointwiseKind kind : {PointwiseKind::Mse, PointwiseKind::Cosine, PointwiseKind::Kl}) {
        TrainConfig cfg = student_cfg(Stage::StudentPointwise, 2);
        cfg.pointwise_kind = kind;
        const StudentTrainResult r = train_student(ds, &t.teacher, &t.tnet, cfg);
        CHECK(r.log.rows[0].ot_loss > 0.0);
        CHECK(r.student.has_value());
    }
}

TEST_CASE("evaluate: zeroed classifier sits at chance on balanced classes") {
    SyntheticSpec spec = small_sew(500);
    spec.classes = 5;
    const Dataset ds = generate(spec);
    Rng rng(1);
    PrevalentOnlyModel p = make_prevalent_only(small_arch(), 16, 5, rng);
    for (auto& w : p.prevalent_backbone.weights) w = Tensor2(w.rows(), w.cols(), 0.0);
    for (auto& w : p.fusion_head.weights) w = Tensor2(w.rows(), w.cols(), 0.0);
    for (auto& b : p.fusion_head.biases) b = Tensor2(b.rows(), b.cols(), 0.0);
    const EvalResult e = evaluate(p, ds, Split::Val);
    CHECK(e.metrics[0] == doctest::Approx(0.2).epsilon(0.35)); // ties resolve to class 0; balanced
    CHECK(e.task_loss == doctest::Approx(std::log(5.0)).epsilon(1e-9));
}

TEST_CASE("divergence aborts with epoch and batch context") {
    const Dataset ds = generate(clean_two_class(100));
    TrainConfig cfg = teacher_cfg(10);
    cfg.learning_rate = 1e6; // guaranteed blow-up under tanh saturation + exp
    CHECK_THROWS_AS(train_teacher(ds, cfg), DivergenceError);
}

TEST_CASE("metrics csv schema") {
    const Dataset ds = generate(small_sew(120));
    const TeacherTrainResult t = train_teacher(ds, teacher_cfg(2, 2));
    const std::string csv = t.log.to_csv();
    CHECK(csv.rfind("epoch,split,task_loss,ot_loss,total_loss,metric_1,sinkhorn_converged_frac,frobenius_gap\n",
                    0) == 0);
    CHECK(csv.find("1,train,") != std::string::npos);
    CHECK(csv.find("2,val,") != std::string::npos);
}

TEST_CASE("ablate: single grid point matches a direct run; shapes are right") {
    const Dataset ds = generate(small_sew(160));
    const TrainConfig tcfg = teacher_cfg(4, 3);
    TrainConfig scfg = student_cfg(Stage::StudentPkdot, 3, 3);

    AblationGrid one;
    one.epsilons = {0.1};
    const std::vector<AblateRow> rows = ablate(ds, tcfg, scfg, one, {3});
    REQUIRE(rows.size() == 1);

    const TeacherTrainResult t = train_teacher(ds, [&] {
        TrainConfig c = tcfg;
        c.seed = 3;
        return c;
    }());
    TrainConfig direct = scfg;
    direct.seed = 3;
    const StudentTrainResult r = train_student(ds, &t.teacher, &t.tnet, direct);
    CHECK(rows[0].val_metrics == r.best_val.metrics);
    CHECK(rows[0].val_task_loss == r.best_val.task_loss);

    AblationGrid grid;
    grid.epsilons = {0.1, 1.0};
    grid.k_anchors = {4, 8};
    const std::vector<AblateRow> rows4 = ablate(ds, tcfg, scfg, grid, {3, 4});
    CHECK(rows4.size() == 8);
    const std::string csv = ablate_csv(rows4, 1);
    CHECK(csv.rfind("batch_size,k_anchors,epsilon,seed,val_metric_1,val_task_loss\n", 0) == 0);

    CHECK_THROWS_AS(ablate(ds, tcfg, scfg, AblationGrid{}, {3}), ContractError);
}
