#include <cstdio>
int main() { std::printf("mmtryon cli placeholder\n"); return 0; }
