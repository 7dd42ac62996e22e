#include <cstdio>

int main(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::puts("mixrec: not wired up yet");
    return 1;
}
