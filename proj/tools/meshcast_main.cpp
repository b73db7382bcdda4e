#include <cstdio>

int main() {
  std::puts("meshcast: CLI not wired yet");
  return 0;
}
