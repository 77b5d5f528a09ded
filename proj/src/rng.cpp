#include "deeptraverse/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "deeptraverse/errors.hpp"

namespace dt {

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw InputError("Rng::below(0)");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    std::mt19937_64 e;
    is >> e;
    if (is.fail()) throw FormatError("malformed random stream state");
    engine_ = e;
}

}  // namespace dt
