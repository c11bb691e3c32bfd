// Placeholder entry point; subcommands are wired up in later commits.
#include <cstdio>

int main() {
    std::printf("wsf: not yet implemented\n");
    return 1;
}
