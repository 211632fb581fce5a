#include <cstdio>

int main() {
  std::puts("qpatkit: subcommands not wired up yet");
  return 1;
}
