#include "pkdot/pkdot.hpp"
int main() { return 0; }
