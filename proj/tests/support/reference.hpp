#pragma once

// Straightforward re-implementations used as test oracles. They share
// parameter names with the library but none of its code paths.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "moh/horizon.hpp"
#include "moh/numcore/params.hpp"

namespace ref {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat from_param(const moh::nc::ParamStore<double>& s, const std::string& name) {
  const auto& t = s.get(name).value;
  const std::size_t r = t.shape.size() == 1 ? 1 : t.shape[0], c = t.shape.back();
  Mat m = zeros(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data[i * c + j];
  return m;
}

// x W + b for named weight and bias.
inline Mat affine(const Mat& x, const moh::nc::ParamStore<double>& s, const std::string& wname,
                  const std::string& bname) {
  const Mat w = from_param(s, wname);
  const Mat b = from_param(s, bname);
  Mat y = zeros(x.size(), w[0].size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) {
      double acc = b[0][j];
      for (std::size_t p = 0; p < w.size(); ++p) acc += x[i][p] * w[p][j];
      y[i][j] = acc;
    }
  return y;
}

inline Mat affine(const Mat& x, const moh::nc::ParamStore<double>& s, const std::string& prefix) {
  return affine(x, s, prefix + ".w", prefix + ".b");
}

inline Mat norm(const Mat& x, const moh::nc::ParamStore<double>& s, const std::string& prefix) {
  const Mat g = from_param(s, prefix + ".g"), b = from_param(s, prefix + ".b");
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = double(x[i].size());
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= n;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
  }
  return y;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

inline std::vector<double> time_features(double tau, std::size_t width) {
  std::vector<double> e(width, 0.0);
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double period = 4e-3 * std::pow(1000.0, half == 1 ? 0.0 : double(i) / double(half - 1));
    e[i] = std::sin(2.0 * std::numbers::pi * tau / period);
    e[half + i] = std::cos(2.0 * std::numbers::pi * tau / period);
  }
  return e;
}

struct StreamSpec {
  std::size_t layers = 2, heads = 2, d = 8;
  bool time_token = true;
};

// One sample, one stream of h action tokens (or queries when `actions` is
// empty). Context tokens see the context; everything else sees everything.
// Returns final-normed hidden states at the h action positions.
inline Mat stream_forward(const moh::nc::ParamStore<double>& s, const StreamSpec& spec, const Mat& ctx,
                          const Mat& actions, std::size_t h, double tau) {
  const std::size_t C = ctx.size(), d = spec.d, Tt = spec.time_token ? 1 : 0;
  Mat x = ctx;
  if (Tt) {
    Mat e{time_features(tau, d)};
    x.push_back(affine(e, s, "tf.time")[0]);
  }
  const Mat pos = from_param(s, "tf.pos");
  Mat tok = actions.empty() ? Mat(h, from_param(s, "tf.query")[0]) : affine(actions, s, "tf.act_in");
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t j = 0; j < d; ++j) tok[k][j] += pos[k][j];
    x.push_back(tok[k]);
  }
  const std::size_t L = x.size(), dh = d / spec.heads;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string p = "tf.l" + std::to_string(l) + ".";
    Mat hn = norm(x, s, p + "ln1");
    Mat q = affine(hn, s, p + "attn.q"), kk = affine(hn, s, p + "attn.k"), v = affine(hn, s, p + "attn.v");
    Mat a = zeros(L, d);
    for (std::size_t hd = 0; hd < spec.heads; ++hd)
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t keys = i < C ? C : L;
        std::vector<double> w(keys);
        double mx = -1e300, z = 0;
        for (std::size_t j = 0; j < keys; ++j) {
          double dot = 0;
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) dot += q[i][c] * kk[j][c];
          w[j] = dot / std::sqrt(double(dh));
          mx = std::max(mx, w[j]);
        }
        for (auto& wj : w) z += (wj = std::exp(wj - mx));
        for (std::size_t j = 0; j < keys; ++j)
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) a[i][c] += w[j] / z * v[j][c];
      }
    Mat o = affine(a, s, p + "attn.o");
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[i][j];
    Mat f = affine(norm(x, s, p + "ln2"), s, p + "ffn.w1", p + "ffn.b1");
    for (auto& row : f)
      for (auto& v2 : row) v2 = gelu(v2);
    Mat g = affine(f, s, p + "ffn.w2", p + "ffn.b2");
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += g[i][j];
  }
  Mat out(x.begin() + long(C + Tt), x.end());
  return norm(out, s, "tf.lnf");
}

// Algorithm 1 over precomputed per-step disagreements (1-based steps).
inline std::size_t consensus(std::span<const double> dbar, std::span<const std::size_t> horizons, double r,
                             std::size_t n, std::size_t m) {
  const std::size_t H = *std::max_element(horizons.begin(), horizons.end());
  double thres = 0;
  for (std::size_t k = 1; k <= n; ++k) thres += dbar[k - 1];
  thres = thres / double(n) * r;
  std::size_t K = n;
  for (std::size_t k = n + 1; k <= H; ++k) {
    std::size_t active = 0;
    for (std::size_t h : horizons) active += k <= h ? 1 : 0;
    if (active < m) break;
    if (dbar[k - 1] > thres) break;
    K = k;
  }
  return K;
}

// Balance statistic from alpha rows (b, k) x N, straight from the definition.
inline double balance(const std::vector<double>& alpha, std::span<const std::size_t> hs, std::size_t B,
                      double eps = 1e-8) {
  const std::size_t N = hs.size(), H = hs.back();
  double total = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t lo = i == 0 ? 0 : hs[i - 1], hi = hs[i];
    if (N - i < 2) continue;
    std::vector<double> u;
    for (std::size_t n = i; n < N; ++n) {
      double acc = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = lo; k < hi; ++k) acc += alpha[(b * H + k) * N + n];
      u.push_back(acc / double(B * (hi - lo)));
    }
    double mu = 0, var = 0;
    for (double x : u) mu += x;
    mu /= double(u.size());
    for (double x : u) var += (x - mu) * (x - mu);
    var /= double(u.size());
    total += var / (mu * mu + eps);
    ++used;
  }
  return used ? total / double(used) : 0.0;
}

}  // namespace ref
