#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cocokit/gradcheck.hpp"
#include "cocokit/stats.hpp"
#include "cocokit/trainer.hpp"

namespace fs = std::filesystem;
using namespace cocokit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

std::vector<ClassId> random_labels(std::mt19937_64& rng, int n, int classes) {
  std::vector<ClassId> labels(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) labels[j] = j % classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

long peak_rss_mb() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return usage.ru_maxrss / 1024;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return fingerprint(buf.str());
}

std::string tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + ":" + file_hash(f) + "\n";
  return fingerprint(all);
}

int run(const std::string& args) {
  const std::string cmd = std::string(COCOKIT_CLI) + " " + args + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome gradient_oracles() {
  const auto t0 = Clock::now();
  CollabCheckOptions o;
  o.d = o.m = o.n = 12;
  o.random_sizes = true;
  o.trials = 50;
  o.seed = 20240501;
  double worst = 0.0;
  std::string names;
  for (const auto& r : check_collab_gradients(o)) {
    worst = std::max(worst, r.max_rel_error);
    names += r.name + "=" + fmt(r.max_rel_error, 2) + " ";
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 5.0, names + "in " + fmt(t) + " s"};
}

Outcome featnet_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    FeatnetCheckOptions o;
    o.seed = seed;
    worst = std::max(worst, check_featnet_gradients(o).max_rel_error);
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 30.0, "10 seeds, worst " + fmt(worst, 2) + " in " + fmt(t) + " s"};
}

Outcome woodbury() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (double lambda : {1e-3, 1e-1, 1.0, 10.0})
    for (int trial = 0; trial < 10; ++trial) {
      const int d = 1 + static_cast<int>(rng() % 16);
      const int m = 1 + static_cast<int>(rng() % 256);
      const Mat x = random_mat(rng, d, m);
      const Mat b = random_mat(rng, m, 3);
      const double s = 0.5 + static_cast<double>(rng() % 100) / 50.0;
      worst = std::max(worst, relative_frobenius(ridge_gram_inverse_apply_fast(x, s, lambda, b),
                                                 ridge_gram_inverse_apply(x, s, lambda, b)));
    }
  const Mat x = random_mat(rng, 64, 20000);
  const Mat b = random_mat(rng, 20000, 4);
  const auto t0 = Clock::now();
  const Mat r = ridge_gram_inverse_apply_fast(x, 1.3, 0.5, b);
  const double t = seconds_since(t0);
  const double resid = (1.3 * (x.transpose() * (x * r)) + 0.5 * r - b).norm() / b.norm();
  const long mb = peak_rss_mb();
  return {worst <= 1e-8 && t < 10.0 && mb < 500 && resid < 1e-8,
          "equivalence " + fmt(worst, 2) + ", m=20000 in " + fmt(t) + " s, residual " + fmt(resid, 2) + ", peak " +
              std::to_string(mb) + " MB"};
}

Outcome closed_form() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 1.0);
  double crc_grad = 0.0, pro_grad = 0.0, reduction = 0.0;
  int improved = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 4 + static_cast<int>(rng() % 12);
    const int classes = 2 + static_cast<int>(rng() % 4);
    const int n = classes * (1 + static_cast<int>(rng() % 5));
    const auto labels = random_labels(rng, n, classes);
    const Dictionary dict(random_mat(rng, d, n), labels);
    const Vec y = random_mat(rng, d, 1).col(0);
    const double lambda = std::pow(10.0, -2.0 + static_cast<double>(rng() % 4));
    const double gamma = 0.5;
    const Mat& x = dict.X();

    const Vec a = crc_encode(dict, y, lambda);
    const Vec g = x.transpose() * (x * a - y) + lambda * a;
    crc_grad = std::max(crc_grad, g.norm() / (x.transpose() * y).norm());

    const ProCrcModel pro(dict, lambda, gamma);
    const Vec p = pro.encode(y);
    Vec gp = x.transpose() * (x * p - y) + lambda * p;
    for (int k = 0; k < classes; ++k) {
      Vec outside = p;
      const auto& range = dict.class_ranges()[k];
      outside.segment(range.begin, range.size()).setZero();
      const Vec v = x * outside;
      Vec back = x.transpose() * v;
      back.segment(range.begin, range.size()).setZero();
      gp += gamma / classes * back;
    }
    pro_grad = std::max(pro_grad, gp.norm() / (x.transpose() * y).norm());

    const double base_crc = crc_cost(dict, y, a, lambda);
    const double base_pro = procrc_cost(pro, y, p);
    for (int k = 0; k < 200; ++k) {
      const double scale = std::pow(10.0, -4.0 + static_cast<double>(k % 5));
      Vec delta(n);
      for (auto& v : delta) v = scale * normal(rng);
      improved += crc_cost(dict, y, a + delta, lambda) < base_crc;
      improved += procrc_cost(pro, y, p + delta) < base_pro;
    }

    const ProCrcModel flat(dict, lambda, 0.0);
    reduction = std::max(reduction, (flat.encode(y) - a).norm() / a.norm());
  }
  return {crc_grad <= 1e-8 && pro_grad <= 1e-8 && reduction <= 1e-8 && improved == 0,
          "crc gradient " + fmt(crc_grad, 2) + ", procrc gradient " + fmt(pro_grad, 2) + ", gamma=0 gap " +
              fmt(reduction, 2) + ", improving perturbations " + std::to_string(improved) + "/4000"};
}

Outcome init_a_fidelity() {
  std::mt19937_64 rng(13);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(rng() % 12);
    const int m = 2 + static_cast<int>(rng() % 30);
    const int n = 2 + static_cast<int>(rng() % 20);
    PartitionPair pp;
    pp.X = random_mat(rng, d, m);
    pp.Y = random_mat(rng, d, n);
    const Vec w = random_mat(rng, n, 1).col(0).cwiseAbs().array() + 0.1;
    const double lambda = 0.1 + static_cast<double>(rng() % 50) / 10.0;
    const Mat wwT = w * w.transpose();
    const Mat lhs = pp.X.transpose() * pp.X * (w.transpose() * w)(0, 0) + lambda * Mat::Identity(m, m);
    const Mat expected = lhs.inverse() * pp.X.transpose() * pp.Y * wwT;
    for (auto path : {SolverPath::kDirect, SolverPath::kFast})
      worst = std::max(worst, relative_frobenius(init_A(pp, w, lambda, path), expected));
  }
  return {worst <= 1e-10, "20 instances, both paths, worst " + fmt(worst, 2)};
}

Outcome significance_statistics() {
  const auto t0 = Clock::now();
  const double p = binomial_sign_test(33, 45, 0.5);
  const double a = bonferroni(0.05, 9);
  const double t = seconds_since(t0);
  return {std::abs(p - 0.0012) <= 0.0003 && std::abs(a - 0.00556) <= 1e-5 && t < 1.0,
          "p=" + fmt(p, 4) + ", adjusted alpha=" + fmt(a, 4)};
}

Outcome ablation_ordering() {
  const auto t0 = Clock::now();
  const std::vector<TrainMode> modes{TrainMode::kSoftmax, TrainMode::kCascadeCrc, TrainMode::kCoconet};
  int held = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig sc;
    sc.seed = seed;
    TrainConfig cfg = TrainConfig::desk();
    cfg.seed = seed;
    const auto reports = crossval(cfg, synth_finegrained(sc), 5, modes);
    const double soft = reports.at(TrainMode::kSoftmax).mean;
    const double crc = reports.at(TrainMode::kCascadeCrc).mean;
    const double coco = reports.at(TrainMode::kCoconet).mean;
    const bool ok = coco >= crc && crc >= soft && coco - soft >= 2.0;
    held += ok;
    per_seed += " seed" + std::to_string(seed) + "[" + fmt(coco, 3) + "/" + fmt(crc, 3) + "/" + fmt(soft, 3) + "]";
    std::cout << "    seed " << seed << ": coconet " << fmt(coco, 4) << ", cascade_crc " << fmt(crc, 4)
              << ", softmax " << fmt(soft, 4) << (ok ? "  ordered" : "  not ordered") << std::endl;
  }
  const double t = seconds_since(t0);
  return {held >= 4 && t < 1800.0,
          "ordering held on " + std::to_string(held) + "/5 seeds (coconet/crc/softmax)" + per_seed + " in " +
              fmt(t, 4) + " s"};
}

Outcome monotone_optimization(const fs::path& work) {
  std::mt19937_64 rng(17);
  int increases = 0, steps = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const int d = 2 + static_cast<int>(rng() % 12);
    const int m = 2 + static_cast<int>(rng() % 20);
    const int n = 2 + static_cast<int>(rng() % 20);
    PartitionPair pp;
    pp.X = random_mat(rng, d, m);
    pp.Y = random_mat(rng, d, n);
    CollabState st;
    st.A = random_mat(rng, m, n);
    st.W = random_mat(rng, n, 1).col(0).cwiseAbs().array() + 0.1;
    st.lambda = 0.5;
    st.gamma = trial % 2 ? 0.1 : 0.0;
    st.weighting = trial % 3 ? ResidualWeighting::kMixed : ResidualWeighting::kPerColumn;
    BacktrackOptions opts;
    opts.eta_W = opts.eta_A = 1.0;
    for (int it = 0; it < 100; ++it) {
      const auto r = backtracking_update(pp, st, opts);
      increases += r.cost_after > r.cost_before || collab_cost(pp, r.state) > r.cost_before;
      ++steps;
      st = r.state;
    }
  }

  const fs::path data = work / "c8";
  const fs::path model = work / "c8.ckpt";
  const fs::path log = work / "c8.loss.csv";
  if (run("gen-data --out " + data.string()) != 0 ||
      run("train --mode coconet --set collab_epochs=50 --data " + (data / "manifest.csv").string() + " --out " +
          model.string() + " --log " + log.string()) != 0)
    return {false, "coconet run failed"};
  std::ifstream in(log);
  std::string line;
  std::getline(in, line);
  std::vector<double> costs;
  bool finite = true;
  while (std::getline(in, line)) {
    const auto cells = detail::split(line, ',');
    if (cells.size() < 3) continue;
    double v = 0.0;
    if (!detail::parse_double(cells[2], v) || !std::isfinite(v)) finite = false;
    if (cells[1] == "coconet") costs.push_back(v);
  }
  const bool descended = costs.size() == 50 && costs.back() < costs.front();
  return {increases == 0 && finite && descended,
          std::to_string(increases) + " increases in " + std::to_string(steps) + " backtracking steps; " +
              std::to_string(costs.size()) + " coconet epochs, finite=" + (finite ? "yes" : "no") + ", cost " +
              (costs.empty() ? "n/a" : fmt(costs.front(), 4) + " -> " + fmt(costs.back(), 4))};
}

Outcome determinism(const fs::path& work) {
  std::vector<std::string> hashes[3];
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path dir = work / ("det" + std::to_string(rep));
    fs::create_directories(dir);
    const std::string manifest = (dir / "data" / "manifest.csv").string();
    const std::string quick = " --set softmax_epochs=4 --set collab_epochs=4 --seed 9";
    if (run("gen-data --classes 4 --per-class 20 --seed 9 --out " + (dir / "data").string()) != 0 ||
        run("train --mode coconet --data " + manifest + " --out " + (dir / "m.ckpt").string() + quick) != 0 ||
        run("crossval --mode cascade_procrc --k 3 --data " + manifest + " --out " + (dir / "cv.json").string() + quick) != 0)
      return {false, "cli run failed"};
    hashes[0].push_back(tree_hash(dir / "data"));
    hashes[1].push_back(file_hash(dir / "m.ckpt"));
    hashes[2].push_back(file_hash(dir / "cv.json"));
  }
  const bool same = hashes[0][0] == hashes[0][1] && hashes[1][0] == hashes[1][1] && hashes[2][0] == hashes[2][1];
  return {same, "dataset " + hashes[0][0] + "/" + hashes[0][1] + ", checkpoint " + hashes[1][0] + "/" + hashes[1][1] +
                    ", report " + hashes[2][0] + "/" + hashes[2][1]};
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / ("cocokit_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"collaborative head gradients vs finite differences", gradient_oracles},
      {"feature network gradients vs finite differences", featnet_check},
      {"fast and direct ridge solvers agree; large fast solve", woodbury},
      {"closed-form CRC and ProCRC codes are optimal", closed_form},
      {"init_A matches the dense formula", init_a_fidelity},
      {"sign test and Bonferroni threshold", significance_statistics},
      {"ablation ordering coconet >= cascade_crc >= softmax", ablation_ordering},
      {"monotone backtracking and 50-epoch coconet descent", [&] { return monotone_optimization(work); }},
      {"rerun determinism of gen-data, train, crossval", [&] { return determinism(work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  fs::remove_all(work);
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
