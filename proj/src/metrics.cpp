#include "orthokd/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include "orthokd/distill.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/ops.hpp"

namespace orthokd {

double surplus(double unpruned_scratch, double unpruned_kd, double finetuned_scratch,
               double self_distill) {
  for (double v : {unpruned_scratch, unpruned_kd, finetuned_scratch, self_distill}) {
    if (v < 0.0 || v > 100.0) throw ConfigError("surplus: accuracies must lie in [0,100]");
  }
  return (self_distill - finetuned_scratch) - (unpruned_kd - unpruned_scratch);
}

ConfidenceReport confidence_report(std::span<const double> scores) {
  if (scores.size() < 2) throw ConfigError("confidence_report: need at least two scores");
  const double n = static_cast<double>(scores.size());
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= n;
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  return confidence_from_stddev(std::sqrt(ss / (n - 1.0)), scores.size(), mean);
}

ConfidenceReport confidence_from_stddev(double stddev, std::size_t n, double avg) {
  if (n < 2) throw ConfigError("confidence_report: need at least two scores");
  ConfidenceReport r;
  r.n = n;
  r.avg = avg;
  r.stddev = stddev;
  r.err_margin = stddev / std::sqrt(static_cast<double>(n));
  r.interval99 = kZ99 * r.err_margin;
  return r;
}

std::string score_csv(const std::vector<std::pair<std::string, ConfidenceReport>>& rows) {
  std::ostringstream os;
  os << "name,n,avg,stddev,errmargin,interval99\n" << std::setprecision(10);
  for (const auto& [name, r] : rows) {
    os << name << ',' << r.n << ',' << r.avg << ',' << r.stddev << ',' << r.err_margin << ','
       << r.interval99 << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- NASWOT

Tensor correlation_matrix(const Tensor& rows, std::size_t* degenerate) {
  if (rows.rank() != 2) throw ShapeError("correlation_matrix: expected [N, D]");
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat z = Eigen::Map<const Mat>(rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<bool> flat(n, false);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = z.row(static_cast<Eigen::Index>(i));
    r.array() -= r.mean();
    const double norm = r.norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      flat[i] = true;
      ++bad;
    } else {
      r /= norm;
    }
  }
  Mat c = z * z.transpose();
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = (flat[i] || flat[j] || i == j)
                         ? 1.0
                         : c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  if (degenerate) *degenerate = bad;
  return out;
}

double naswot_from_correlation(const Tensor& corr, double k) {
  if (corr.rank() != 2 || corr.dim(0) != corr.dim(1)) {
    throw ShapeError("naswot: correlation matrix must be square");
  }
  const auto n = static_cast<Eigen::Index>(corr.dim(0));
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::Map<const Mat>(corr.data(), n, n),
                                                    Eigen::EigenvaluesOnly);
  double s = 0.0;
  for (double sigma : es.eigenvalues()) {
    // Rounding can push a zero eigenvalue slightly negative.
    const double v = std::max(sigma, 0.0) + k;
    s += std::log(v) + 1.0 / v;
  }
  return -s;
}

NaswotResult naswot_from_jacobians(const Tensor& jacobians, double k) {
  if (jacobians.rank() != 2 || jacobians.dim(0) < 2) {
    throw ShapeError("naswot: need at least two Jacobian rows");
  }
  NaswotResult r;
  r.score = naswot_from_correlation(correlation_matrix(jacobians, &r.degenerate_rows), k);
  return r;
}

Tensor input_jacobians(const ModelGraph& model, const Tensor& batch) {
  ModelGraph frozen = model;
  frozen.set_trainable(false);
  Tape tape;
  Variable x(batch, true, "input");
  const ForwardOutput out = forward_eval(frozen, tape, x);
  tape.backward(sum(tape, out.logits));
  return x.grad().reshaped({batch.dim(0), batch.numel() / batch.dim(0)});
}

NaswotResult naswot_score(const ModelGraph& model, const Tensor& batch, double k) {
  NaswotResult r = naswot_from_jacobians(input_jacobians(model, batch), k);
  if (r.degenerate_rows > 0) {
    log_warning("naswot: " + std::to_string(r.degenerate_rows) +
                " zero-variance Jacobian row(s); correlations set to 1");
  }
  return r;
}

// ------------------------------------------------------------- landscape

std::vector<Tensor> filter_normalized_direction(const std::vector<Tensor>& params,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Tensor> dir;
  dir.reserve(params.size());
  for (const auto& p : params) {
    Tensor d(p.shape());
    if (p.rank() >= 2) {
      for (auto& v : d.values()) v = gauss(rng);
      const std::size_t rows = p.dim(0), per = p.numel() / rows;
      for (std::size_t r = 0; r < rows; ++r) {
        double dn = 0.0, pn = 0.0;
        for (std::size_t j = 0; j < per; ++j) {
          dn += d[r * per + j] * d[r * per + j];
          pn += p[r * per + j] * p[r * per + j];
        }
        const double f = dn > 0.0 ? std::sqrt(pn) / std::sqrt(dn) : 0.0;
        for (std::size_t j = 0; j < per; ++j) d[r * per + j] *= f;
      }
    }
    dir.push_back(std::move(d));
  }
  return dir;
}

LandscapeSlice landscape_slice(const std::vector<Tensor>& params, const ParamLossFn& loss,
                               std::size_t grid_n, std::uint64_t seed_a, std::uint64_t seed_b,
                               std::size_t jobs) {
  if (grid_n < 1 || grid_n % 2 == 0) throw ConfigError("landscape: grid size must be odd");
  LandscapeSlice s;
  s.grid_n = grid_n;
  s.seed_a = seed_a;
  s.seed_b = seed_b;
  s.coords.resize(grid_n);
  const std::size_t mid = grid_n / 2;
  for (std::size_t i = 0; i < grid_n; ++i) {
    // Exact zero at the centre regardless of rounding.
    s.coords[i] = grid_n == 1 ? 0.0
                              : (static_cast<double>(i) - static_cast<double>(mid)) /
                                    static_cast<double>(mid);
  }
  s.loss.assign(grid_n * grid_n, 0.0);
  const auto d = filter_normalized_direction(params, seed_a);
  const auto e = filter_normalized_direction(params, seed_b);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    std::vector<Tensor> theta = params;
    for (std::size_t idx; (idx = next++) < grid_n * grid_n;) {
      const double a = s.coords[idx % grid_n], b = s.coords[idx / grid_n];
      for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t k = 0; k < params[p].numel(); ++k)
          theta[p][k] = params[p][k] + a * d[p][k] + b * e[p][k];
      s.loss[idx] = loss(theta);
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, grid_n * grid_n));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return s;
}

double dataset_loss(const ModelGraph& model, const Tensor& inputs, const std::vector<int>& labels,
                    std::size_t batch_size) {
  const std::size_t n = inputs.dim(0), per = inputs.numel() / n;
  if (labels.size() != n) throw ShapeError("dataset_loss: one label per input required");
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    Shape s = inputs.shape();
    s[0] = m;
    Tensor xb(s, std::vector<double>(inputs.data() + start * per, inputs.data() + (start + m) * per));
    const Tensor logits = predict_logits(model, xb);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      const auto q = softened_softmax(std::span<const double>(logits.data() + i * c, c), 1.0);
      total -= std::log(std::max(q[static_cast<std::size_t>(labels[start + i])],
                                 std::numeric_limits<double>::min()));
    }
  }
  return total / static_cast<double>(n);
}

LandscapeSlice landscape_slice(const ModelGraph& model, const Tensor& inputs,
                               const std::vector<int>& labels, std::size_t grid_n,
                               std::uint64_t seed_a, std::uint64_t seed_b, std::size_t jobs) {
  std::vector<Tensor> params;
  for (const auto& p : model.params) params.push_back(p.value());
  ParamLossFn fn = [&](const std::vector<Tensor>& theta) {
    ModelGraph m = model;
    for (std::size_t i = 0; i < theta.size(); ++i) m.params[i].mutable_value() = theta[i];
    return dataset_loss(m, inputs, labels);
  };
  return landscape_slice(params, fn, grid_n, seed_a, seed_b, jobs);
}

namespace {
std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os << std::setprecision(17);
  return os;
}
}  // namespace

void write_landscape_csv(const std::string& path, const LandscapeSlice& slice) {
  auto os = open_out(path);
  os << "a,b,loss\n";
  for (std::size_t j = 0; j < slice.grid_n; ++j)
    for (std::size_t i = 0; i < slice.grid_n; ++i)
      os << slice.coords[i] << ',' << slice.coords[j] << ',' << slice.at(i, j) << '\n';
}

void write_landscape_vtk(const std::string& path, const LandscapeSlice& slice) {
  auto os = open_out(path);
  const double spacing = slice.grid_n > 1 ? 2.0 / static_cast<double>(slice.grid_n - 1) : 1.0;
  os << "# vtk DataFile Version 3.0\n"
     << "loss landscape seeds " << slice.seed_a << ' ' << slice.seed_b << "\n"
     << "ASCII\nDATASET STRUCTURED_POINTS\n"
     << "DIMENSIONS " << slice.grid_n << ' ' << slice.grid_n << " 1\n"
     << "ORIGIN -1 -1 0\n"
     << "SPACING " << spacing << ' ' << spacing << " 1\n"
     << "POINT_DATA " << slice.grid_n * slice.grid_n << "\n"
     << "SCALARS loss double 1\nLOOKUP_TABLE default\n";
  for (double v : slice.loss) os << v << '\n';
}

}  // namespace orthokd
