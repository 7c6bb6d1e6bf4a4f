#include "thm/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "thm/errors.hpp"

namespace thm {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& w : s_) w = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ParameterError("Rng::below: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t salt) const {
  std::uint64_t x = seed_ ^ (salt * 0xd1b54a32d192ed03ULL);
  return Rng(splitmix64(x));
}

std::string Rng::save_state() const {
  char buf[5 * 17];
  std::snprintf(buf, sizeof buf, "%016llx:%016llx:%016llx:%016llx:%016llx",
                static_cast<unsigned long long>(seed_), static_cast<unsigned long long>(s_[0]),
                static_cast<unsigned long long>(s_[1]), static_cast<unsigned long long>(s_[2]),
                static_cast<unsigned long long>(s_[3]));
  return buf;
}

Rng Rng::load_state(const std::string& text) {
  unsigned long long w[5];
  if (std::sscanf(text.c_str(), "%16llx:%16llx:%16llx:%16llx:%16llx", &w[0], &w[1], &w[2], &w[3],
                  &w[4]) != 5) {
    throw DataError("malformed rng state '" + text + "'");
  }
  Rng r;
  r.seed_ = w[0];
  for (int i = 0; i < 4; ++i) r.s_[i] = w[i + 1];
  return r;
}

}  // namespace thm
