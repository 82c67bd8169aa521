#include "pointdif/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "pointdif/errors.hpp"
#include "pointdif/rng.hpp"

namespace pointdif {

namespace {

double directed_chamfer(const Points& a, const Points& b) {
  double sum = 0.0;
  for (Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < b.rows(); ++j) best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    sum += best;
  }
  return sum / static_cast<double>(a.rows());
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double chamfer(const Points& a, const Points& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ValidationError("chamfer: empty point set");
  return directed_chamfer(a, b) + directed_chamfer(b, a);
}

PointCloud generate(const Model& model, const NoiseSchedule& sched, const Eigen::RowVectorXd& c,
                    Index n_points, std::uint64_t seed) {
  Rng rng(seed);
  Denoiser denoiser = [&](const Matrix& x_t, int t) { return predict_noise(model, x_t, c, t); };
  return PointCloud(sample_loop(denoiser, n_points, sched, rng));
}

Reconstruction reconstruct_from(const Model& model, const NoiseSchedule& sched,
                                const PointCloud& target, const PointCloud& condition_source,
                                double mask_ratio, std::uint64_t seed, const PatchOptions& patches) {
  check_cloud(target);
  check_cloud(condition_source);
  PatchSet ps = make_patches(condition_source, patches, derive_seed(seed, 0));
  apply_mask(ps, mask_ratio, derive_seed(seed, 1));

  std::set<Index> kept;
  for (Index p : ps.visible)
    for (Index i : ps.neighbors[static_cast<std::size_t>(p)]) kept.insert(i);
  Points view(static_cast<Index>(kept.size()), 3);
  Index row = 0;
  for (Index i : kept) view.row(row++) = condition_source.points.row(i);

  Reconstruction out;
  out.input = target;
  out.masked_view = PointCloud(std::move(view));
  out.generated = generate(model, sched, condition_vector(model, ps), target.size(), derive_seed(seed, 2));
  out.chamfer = chamfer(out.generated, target);
  return out;
}

Reconstruction reconstruct(const Model& model, const NoiseSchedule& sched, const PointCloud& cloud,
                           double mask_ratio, std::uint64_t seed, const PatchOptions& patches) {
  return reconstruct_from(model, sched, cloud, cloud, mask_ratio, seed, patches);
}

// ---------------------------------------------------------------------------

Eigen::RowVectorXd probe_features(const Model& model, const PointCloud& cloud,
                                  const PatchOptions& patches) {
  PatchSet ps = make_patches(cloud, patches, 0);
  Matrix latents = encoder_latents(model, ps);
  Eigen::RowVectorXd f(2 * latents.cols());
  f << latents.colwise().maxCoeff(), latents.colwise().mean();
  return f;
}

ProbeResult fit_linear_classifier(const Matrix& train_x, const std::vector<int>& train_y,
                                  const Matrix& val_x, const std::vector<int>& val_y,
                                  int num_classes, const ProbeConfig& config) {
  if (train_x.rows() != static_cast<Index>(train_y.size()) ||
      val_x.rows() != static_cast<Index>(val_y.size()) || train_x.cols() != val_x.cols())
    throw ValidationError("linear probe: feature/label size mismatch");
  if (train_y.empty() || val_y.empty()) throw ValidationError("linear probe: empty split");
  std::set<int> classes(train_y.begin(), train_y.end());
  if (classes.size() < 2) throw ValidationError("linear probe: training split has a single class");
  for (int y : train_y)
    if (y < 0 || y >= num_classes) throw ValidationError("linear probe: label out of range");

  Eigen::RowVectorXd mean = train_x.colwise().mean();
  Eigen::RowVectorXd sd =
      ((train_x.rowwise() - mean).array().square().colwise().mean()).sqrt().max(1e-8).matrix();
  auto standardize = [&](const Matrix& x) -> Matrix {
    return ((x.rowwise() - mean).array().rowwise() / sd.array()).matrix();
  };
  const Matrix xt = standardize(train_x), xv = standardize(val_x);
  const Index n = xt.rows(), f = xt.cols();

  Matrix onehot = Matrix::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) onehot(i, train_y[static_cast<std::size_t>(i)]) = 1.0;

  Matrix w = Matrix::Zero(f, num_classes);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(num_classes);
  auto softmax = [](Matrix logits) {
    for (Index i = 0; i < logits.rows(); ++i) {
      logits.row(i) = (logits.row(i).array() - logits.row(i).maxCoeff()).exp().matrix();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  };
  for (int step = 0; step < config.steps; ++step) {
    Matrix prob = softmax((xt * w).rowwise() + b);
    Matrix g = (prob - onehot) / static_cast<double>(n);
    w -= config.lr * (xt.transpose() * g + config.l2 * w);
    b -= config.lr * g.colwise().sum();
  }

  ProbeResult r;
  r.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
  Matrix logits = (xv * w).rowwise() + b;
  Index correct = 0;
  for (Index i = 0; i < xv.rows(); ++i) {
    Index pred = 0;
    logits.row(i).maxCoeff(&pred);
    const int truth = val_y[static_cast<std::size_t>(i)];
    r.confusion(truth, pred) += 1;
    if (pred == truth) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(xv.rows());
  for (int c = 0; c < num_classes; ++c) {
    const int total = r.confusion.row(c).sum();
    r.per_class.push_back(total > 0 ? static_cast<double>(r.confusion(c, c)) / total
                                    : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

ProbeResult linear_probe(const Model& model, const ToyDataset& data, const PatchOptions& patches,
                         const ProbeConfig& config) {
  auto features = [&](Split split, std::vector<int>& labels) {
    auto idx = data.indices(split);
    Matrix x(static_cast<Index>(idx.size()), 2 * model.dims().dim);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x.row(static_cast<Index>(i)) = probe_features(model, data.clouds[idx[i]], patches);
      labels.push_back(data.labels[idx[i]]);
    }
    return x;
  };
  std::vector<int> ty, vy;
  Matrix tx = features(Split::train, ty);
  Matrix vx = features(Split::val, vy);
  return fit_linear_classifier(tx, ty, vx, vy, kNumToyClasses, config);
}

// ---------------------------------------------------------------------------

std::string AblationReport::to_csv() const {
  std::ostringstream os;
  os << "setting,probe_accuracy,recon_chamfer\n";
  for (const auto& r : rows)
    os << r.setting << ',' << format_double(r.probe_accuracy) << ',' << format_double(r.recon_chamfer)
       << '\n';
  return os.str();
}

AblationReport AblationReport::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "setting,probe_accuracy,recon_chamfer")
    throw ParseError("ablation report: bad header", 1);
  AblationReport rep;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto c2 = line.rfind(',');
    auto c1 = c2 == std::string::npos ? c2 : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos) throw ParseError("ablation report: expected 3 fields", lineno);
    AblationRow r;
    r.setting = line.substr(0, c1);
    try {
      r.probe_accuracy = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      r.recon_chamfer = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw ParseError("ablation report: bad number on line " + std::to_string(lineno), lineno);
    }
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

void AblationReport::save_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_csv();
  if (!out) throw IoError("write failed: " + path.string());
}

AblationReport AblationReport::load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

std::vector<PointCloud> train_clouds(const ToyDataset& data) {
  std::vector<PointCloud> out;
  for (auto i : data.indices(Split::train)) out.push_back(data.clouds[i]);
  return out;
}

AblationRow run_setting(const ToyDataset& data, const TrainConfig& config, const EvalOptions& eval,
                        std::string setting) {
  TrainState state = fit(train_clouds(data), config);
  AblationRow row;
  row.setting = std::move(setting);
  row.probe_accuracy = linear_probe(state.model, data, config.patches, eval.probe).accuracy;
  row.recon_chamfer = std::numeric_limits<double>::quiet_NaN();
  if (eval.recon_shapes > 0) {
    const NoiseSchedule sched = config.schedule();
    auto val = data.indices(Split::val);
    const auto count = std::min<std::size_t>(val.size(), static_cast<std::size_t>(eval.recon_shapes));
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i)
      sum += reconstruct(state.model, sched, data.clouds[val[i]], eval.recon_mask_ratio,
                         derive_seed(config.seed, 1000 + i), config.patches)
                 .chamfer;
    row.recon_chamfer = sum / static_cast<double>(count);
  }
  return row;
}

std::string interval_label(const Interval& iv) {
  return "[" + std::to_string(iv.lo) + " " + std::to_string(iv.hi) + "]";
}

AblationReport interval_ablation(const ToyDataset& data, const std::vector<Interval>& intervals,
                                 const TrainConfig& config, const EvalOptions& eval) {
  for (const auto& iv : intervals)
    if (iv.lo < 1 || iv.hi > config.steps || iv.lo > iv.hi)
      throw ValidationError("interval ablation: " + interval_label(iv) +
                            " is empty or outside [1, T]");
  AblationReport rep;
  for (const auto& iv : intervals) {
    TrainConfig c = config;
    c.timesteps.restricted = true;
    c.timesteps.restriction = iv;
    rep.rows.push_back(run_setting(data, c, eval, interval_label(iv)));
  }
  TrainConfig full = config;
  full.timesteps.restricted = false;
  rep.rows.push_back(run_setting(data, full, eval, interval_label({1, config.steps}) + " recurrent"));
  return rep;
}

AblationReport mask_ratio_sweep(const ToyDataset& data, const std::vector<double>& ratios,
                                const TrainConfig& config, const EvalOptions& eval) {
  for (double m : ratios) {
    if (!(m >= 0.0 && m <= 0.95))
      throw ValidationError("mask ratio sweep: ratios must lie in [0, 0.95]");
    if (masked_count(config.patches.num_patches, m) >= config.patches.num_patches)
      throw ValidationError("mask ratio " + format_double(m) + " leaves no visible patch");
  }
  AblationReport rep;
  for (double m : ratios) {
    TrainConfig c = config;
    c.mask_ratio = m;
    char label[32];
    std::snprintf(label, sizeof(label), "mask=%g", m);
    rep.rows.push_back(run_setting(data, c, eval, label));
  }
  return rep;
}

AblationReport guidance_ablation(const ToyDataset& data, const std::vector<GuidanceMode>& modes,
                                 const TrainConfig& config, const EvalOptions& eval) {
  AblationReport rep;
  for (auto mode : modes) {
    TrainConfig c = config;
    c.guidance = mode;
    rep.rows.push_back(run_setting(data, c, eval, std::string(to_string(mode))));
  }
  return rep;
}

}  // namespace pointdif
