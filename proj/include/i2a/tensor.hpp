#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "i2a/errors.hpp"

namespace i2a {

// Row-major dense tensor of doubles. Rank is 1..3; images are H x W x C,
// latents h x w x c, text embeddings m x l.
using Shape = std::vector<int>;

int numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(const Shape& s);
    static Tensor full(const Shape& s, double v);
    static Tensor ones(const Shape& s) { return full(s, 1.0); }

    int size() const { return static_cast<int>(data.size()); }
    double& operator[](int i) { return data[static_cast<size_t>(i)]; }
    double operator[](int i) const { return data[static_cast<size_t>(i)]; }

    // Index helpers for rank-3 tensors.
    double& at(int i0, int i1, int i2);
    double at(int i0, int i1, int i2) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

Tensor flatten(const Tensor& t);

// Deterministic PRNG. mt19937_64 plus an explicit Box-Muller transform so the
// generated streams are bit-identical across platforms and standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double gaussian();                      // N(0, 1)
    Tensor gaussian_tensor(const Shape& s, double scale = 1.0);
    Tensor uniform_tensor(const Shape& s, double lo, double hi);

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

// Independent deterministic seed streams derived from one base seed.
uint64_t derive_seed(uint64_t seed, uint64_t stream);

}  // namespace i2a
