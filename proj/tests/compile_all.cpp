#include "xtalk/bench.hpp"
#include "xtalk/loopback.hpp"
int main() { return 0; }
