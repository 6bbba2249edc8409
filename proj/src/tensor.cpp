#include "i2a/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace i2a {

int numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw InputError("shape dimensions must be positive, got " + shape_str(s));
        n *= d;
    }
    return s.empty() ? 0 : n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int>(data.size()) != numel(shape))
        throw InputError("tensor data size does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(const Shape& s) {
    return Tensor(s, std::vector<double>(static_cast<size_t>(numel(s)), 0.0));
}

Tensor Tensor::full(const Shape& s, double v) {
    return Tensor(s, std::vector<double>(static_cast<size_t>(numel(s)), v));
}

double& Tensor::at(int i0, int i1, int i2) {
    return data[static_cast<size_t>((i0 * shape[1] + i1) * shape[2] + i2)];
}

double Tensor::at(int i0, int i1, int i2) const {
    return data[static_cast<size_t>((i0 * shape[1] + i1) * shape[2] + i2)];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor flatten(const Tensor& t) {
    return Tensor({t.size()}, t.data);
}

double Rng::uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

Tensor Rng::gaussian_tensor(const Shape& s, double scale) {
    Tensor t = Tensor::zeros(s);
    for (double& v : t.data) v = gaussian() * scale;
    return t;
}

Tensor Rng::uniform_tensor(const Shape& s, double lo, double hi) {
    Tensor t = Tensor::zeros(s);
    for (double& v : t.data) v = uniform(lo, hi);
    return t;
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

}  // namespace i2a
