// Stand-in for an MPI particle code: forces_stub <particles> <steps> [sleep-seconds]
// Writes forces.stat in the working directory, one "step energy" row per step.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

int main(int argc, char** argv) {
    if (argc < 3 || argc > 4) {
        std::fprintf(stderr, "usage: %s particles steps [sleep-seconds]\n", argv[0]);
        return 2;
    }
    const long n = std::strtol(argv[1], nullptr, 10);
    const long steps = std::strtol(argv[2], nullptr, 10);
    const double pause = argc == 4 ? std::strtod(argv[3], nullptr) : 0.0;
    if (n < 2 || steps < 1 || pause < 0) {
        std::fprintf(stderr, "particles must be >= 2, steps >= 1, sleep >= 0\n");
        return 2;
    }
    if (pause > 0) std::this_thread::sleep_for(std::chrono::duration<double>(pause));

    std::mt19937_64 rng(static_cast<unsigned long>(n));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<double> pos(3 * n), vel(3 * n, 0.0), acc(3 * n);
    for (auto& p : pos) p = U(rng);

    const double dt = 1e-4, soft = 1e-2;
    std::ofstream stat("forces.stat");
    for (long s = 1; s <= steps; ++s) {
        double potential = 0.0;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (long i = 0; i < n; ++i)
            for (long j = i + 1; j < n; ++j) {
                double d[3], r2 = soft;
                for (int k = 0; k < 3; ++k) {
                    d[k] = pos[3 * i + k] - pos[3 * j + k];
                    r2 += d[k] * d[k];
                }
                const double inv = 1.0 / std::sqrt(r2);
                potential += inv;
                for (int k = 0; k < 3; ++k) {
                    acc[3 * i + k] += d[k] * inv * inv * inv;
                    acc[3 * j + k] -= d[k] * inv * inv * inv;
                }
            }
        double kinetic = 0.0;
        for (long i = 0; i < 3 * n; ++i) {
            vel[i] += dt * acc[i];
            pos[i] += dt * vel[i];
            kinetic += 0.5 * vel[i] * vel[i];
        }
        stat << s << ' ' << (kinetic + potential) / static_cast<double>(n) << '\n';
    }
    return stat ? 0 : 1;
}
