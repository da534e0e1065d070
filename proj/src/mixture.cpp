#include "moh/mixture.hpp"

#include <cmath>
#include <ostream>

#include "moh/errors.hpp"

namespace moh::mixture {

namespace {

nc::Tensor<std::uint8_t> batched_step_mask(const HorizonSet& horizons, std::size_t batch) {
  const auto one = horizons.step_mask();
  nc::Tensor<std::uint8_t> m(nc::Shape{batch * one.shape[0], one.shape[1]});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(one.data.begin(), one.data.end(), m.data.begin() + b * one.size());
  return m;
}

}  // namespace

template <typename T>
void init_gate(nc::ParamStore<T>& store, std::size_t d_model, const nc::CounterRng& rng) {
  store.add("gate.w", nc::truncated_normal<T>({d_model, 1}, 0.02, rng.derive("gate.w")));
  store.add("gate.b", nc::zeros<T>({1}), false);
}

template <typename T>
GateWeights<T> gate_from_logits(nc::Var<T> logits, const HorizonSet& horizons, std::size_t batch) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  if (logits.value().shape != nc::Shape{batch * H, N}) {
    throw nc::DimensionError("gate logits " + nc::to_string(logits.value().shape) +
                             " do not match batch " + std::to_string(batch) + " and horizons " +
                             horizons.to_string());
  }
  GateWeights<T> g;
  g.valid = batched_step_mask(horizons, batch);
  g.logits = logits;
  g.alpha = nc::masked_softmax(logits, g.valid, 1);
  g.batch = batch;
  g.horizon = H;
  g.streams = N;
  return g;
}

template <typename T>
GateWeights<T> gate(nc::Binder<T>& bind, nc::Var<T> hidden, const HorizonSet& horizons,
                    std::size_t batch) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  if (hidden.value().rows() != batch * N * H) {
    throw nc::DimensionError("gate: hidden states " + nc::to_string(hidden.value().shape) +
                             " do not match batch x horizons x steps = " +
                             std::to_string(batch * N * H));
  }
  nc::Var<T> raw = nc::linear(hidden, bind("gate.w"), bind("gate.b"));  // rows (b, n, k)
  std::vector<std::size_t> index(batch * H * N);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < H; ++k)
      for (std::size_t n = 0; n < N; ++n) index[(b * H + k) * N + n] = (b * N + n) * H + k;
  nc::Var<T> logits = nc::take(raw, std::move(index), nc::Shape{batch * H, N});
  return gate_from_logits(logits, horizons, batch);
}

template <typename T>
GateWeights<T> average_gate(nc::Tape<T>& tape, const HorizonSet& horizons, std::size_t batch) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  GateWeights<T> g;
  g.valid = batched_step_mask(horizons, batch);
  nc::Tensor<T> a(nc::Shape{batch * H, N});
  for (std::size_t r = 0; r < batch * H; ++r) {
    const std::size_t active = horizons.active_count(r % H + 1);
    for (std::size_t n = 0; n < N; ++n)
      if (g.valid.at(r, n)) a.at(r, n) = T(1) / static_cast<T>(active);
  }
  g.alpha = tape.constant(std::move(a));
  g.batch = batch;
  g.horizon = H;
  g.streams = N;
  return g;
}

template <typename T>
nc::Var<T> fuse(nc::Var<T> per_horizon, const GateWeights<T>& w) {
  const std::size_t B = w.batch, H = w.horizon, N = w.streams;
  if (per_horizon.value().rows() != B * N * H) {
    throw nc::DimensionError("fuse: predictions " + nc::to_string(per_horizon.value().shape) +
                             " do not match gate weights [" + std::to_string(B * H) + " x " +
                             std::to_string(N) + "]");
  }
  std::vector<int> rows(B * H * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < H; ++k)
      for (std::size_t n = 0; n < N; ++n)
        rows[(b * H + k) * N + n] = static_cast<int>((b * N + n) * H + k);
  nc::Var<T> step_major = nc::gather_rows(per_horizon, std::move(rows));
  return nc::mix_rows(w.alpha, step_major);
}

template <typename T>
nc::Var<T> balance_loss(nc::Var<T> alpha, const HorizonSet& horizons, std::size_t batch, double eps) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  const auto& av = alpha.value();
  if (av.shape != nc::Shape{batch * H, N}) {
    throw nc::DimensionError("balance_loss: weights " + nc::to_string(av.shape) +
                             " do not match batch " + std::to_string(batch) + " and horizons " +
                             horizons.to_string());
  }
  // Interval i covers steps (h_{i-1}, h_i] and horizons n >= i.
  std::vector<std::size_t> lo(N), hi(N);
  for (std::size_t i = 0; i < N; ++i) {
    lo[i] = i == 0 ? 0 : horizons[i - 1];
    hi[i] = horizons[i];
  }
  std::size_t qualifying = 0;
  for (std::size_t i = 0; i < N; ++i)
    if (N - i > 1) ++qualifying;
  if (qualifying == 0) return alpha.tape->constant(nc::Tensor<T>::scalar(T(0)));

  // usage[i][n] = mean over batch and interval steps.
  std::vector<std::vector<double>> usage(N, std::vector<double>(N, 0.0));
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const double denom = static_cast<double>(batch * (hi[i] - lo[i]));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = lo[i]; k < hi[i]; ++k)
        for (std::size_t n = i; n < N; ++n) usage[i][n] += av.at(b * H + k, n);
    for (std::size_t n = i; n < N; ++n) usage[i][n] /= denom;
  }
  // dL/dusage[i][n]
  auto dusage = std::make_shared<std::vector<std::vector<double>>>(N, std::vector<double>(N, 0.0));
  double loss = 0.0;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const double m = static_cast<double>(N - i);
    double mu = 0.0;
    for (std::size_t n = i; n < N; ++n) mu += usage[i][n];
    mu /= m;
    double var = 0.0;
    for (std::size_t n = i; n < N; ++n) var += (usage[i][n] - mu) * (usage[i][n] - mu);
    var /= m;
    const double den = mu * mu + eps;
    loss += var / den;
    for (std::size_t n = i; n < N; ++n) {
      (*dusage)[i][n] = (2.0 * (usage[i][n] - mu) / m) / den - var * (2.0 * mu / m) / (den * den);
      (*dusage)[i][n] /= static_cast<double>(qualifying);
    }
  }
  loss /= static_cast<double>(qualifying);

  return alpha.tape->record(
      nc::Tensor<T>::scalar(static_cast<T>(loss)), {alpha},
      [alpha, dusage, lo, hi, batch, H, N](nc::Tape<T>& t, int self) {
        const double gy = static_cast<double>(t.grad(self)[0]);
        auto& ga = t.grad(alpha);
        for (std::size_t i = 0; i + 1 < N; ++i) {
          const double denom = static_cast<double>(batch * (hi[i] - lo[i]));
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t k = lo[i]; k < hi[i]; ++k)
              for (std::size_t n = i; n < N; ++n)
                ga[(b * H + k) * N + n] += static_cast<T>(gy * (*dusage)[i][n] / denom);
        }
      });
}

MoHLossBreakdown moh_objective(double mix, std::span<const double> per_horizon, double bal,
                               double lambda_ind, double lambda_bal) {
  MoHLossBreakdown out;
  out.mix = mix;
  out.per_horizon.assign(per_horizon.begin(), per_horizon.end());
  for (double v : per_horizon) out.ind += v;
  out.bal = bal;
  out.lambda_ind = lambda_ind;
  out.lambda_bal = lambda_bal;
  out.total = mix + lambda_ind * out.ind + lambda_bal * bal;
  return out;
}

template <typename T>
nc::Var<T> moh_objective(nc::Var<T> mix, nc::Var<T> per_horizon, nc::Var<T> bal, double lambda_ind,
                         double lambda_bal) {
  const nc::Var<T> terms[] = {mix, nc::sum(per_horizon), bal};
  const T coeffs[] = {T(1), static_cast<T>(lambda_ind), static_cast<T>(lambda_bal)};
  return nc::linear_combination<T>(terms, coeffs);
}

GateStats::GateStats(HorizonSet horizons)
    : horizons_(std::move(horizons)), sum_(nc::Shape{horizons_.max_horizon(), horizons_.size()}) {}

void GateStats::add(const nc::Tensor<double>& alpha) {
  const std::size_t H = horizons_.max_horizon(), N = horizons_.size();
  if (alpha.cols() != N || alpha.rows() % H != 0) {
    throw nc::DimensionError("gate stats: weights " + nc::to_string(alpha.shape) +
                             " do not match horizons " + horizons_.to_string());
  }
  const std::size_t batch = alpha.rows() / H;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < H; ++k)
      for (std::size_t n = 0; n < N; ++n) sum_.at(k, n) += alpha.at(b * H + k, n);
  samples_ += batch;
}

nc::Tensor<double> GateStats::mean() const {
  nc::Tensor<double> m = sum_;
  if (samples_ == 0) return m;
  for (auto& v : m.data) v /= static_cast<double>(samples_);
  return m;
}

void GateStats::write_csv(std::ostream& os) const {
  const auto m = mean();
  os << "step,horizon,mean_weight\n";
  for (std::size_t k = 0; k < horizons_.max_horizon(); ++k)
    for (std::size_t n = 0; n < horizons_.size(); ++n)
      os << (k + 1) << ',' << horizons_[n] << ',' << m.at(k, n) << '\n';
}

double GateStats::interval_cv2(double eps) const {
  nc::Tape<double> tape(false);
  auto a = tape.constant(mean());
  return balance_loss(a, horizons_, 1, eps).value().item();
}

#define MOH_INSTANTIATE_MIXTURE(T)                                                                 \
  template void init_gate<T>(nc::ParamStore<T>&, std::size_t, const nc::CounterRng&);              \
  template GateWeights<T> gate<T>(nc::Binder<T>&, nc::Var<T>, const HorizonSet&, std::size_t);     \
  template GateWeights<T> gate_from_logits<T>(nc::Var<T>, const HorizonSet&, std::size_t);         \
  template GateWeights<T> average_gate<T>(nc::Tape<T>&, const HorizonSet&, std::size_t);           \
  template nc::Var<T> fuse<T>(nc::Var<T>, const GateWeights<T>&);                                  \
  template nc::Var<T> balance_loss<T>(nc::Var<T>, const HorizonSet&, std::size_t, double);         \
  template nc::Var<T> moh_objective<T>(nc::Var<T>, nc::Var<T>, nc::Var<T>, double, double);

MOH_INSTANTIATE_MIXTURE(float)
MOH_INSTANTIATE_MIXTURE(double)

}  // namespace moh::mixture
