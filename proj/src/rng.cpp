#include "canet/rng.hpp"

#include <sstream>

#include "canet/error.hpp"

namespace canet {

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::restore(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw ValidationError("corrupt RNG state");
}

Rng& global_rng() {
    static Rng rng(0);
    return rng;
}

void set_global_determinism(std::uint64_t seed) { global_rng().reseed(seed); }

}  // namespace canet
