#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "refil/datasets.hpp"
#include "refil/experiment.hpp"
#include "refil/report.hpp"

using namespace refil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("refil_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string small_ssim_spec(const fs::path& out) {
  return R"({"name": "tiny", "recipe": "biased-ssim", "model": {"name": "cnn-early", "init_seed": 3},
    "dataset": {"kind": "synthetic-images", "channels": 3, "height": 16, "width": 16, "count": 6, "seed": 2},
    "subsample": 3, "dfil_grid": [0.01, 1], "trials": 3, "seed": 9,
    "attack": {"method": "tv", "iterations": 40, "restarts": 1},
    "output_dir": ")" +
         out.generic_string() + "\"}";
}

}  // namespace

TEST_CASE("synthetic images survive an IDX round trip bit for bit") {
  const fs::path dir = scratch("idx");
  const LoadedDataset d = make_synthetic_images({10, 1, 28, 28, 25, 4});
  write_mnist_idx(dir / "img.idx", dir / "lbl.idx", d.examples);
  const Dataset back = load_mnist_idx(dir / "img.idx", dir / "lbl.idx");
  REQUIRE(back.size() == d.examples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].x == d.examples[i].x);
    CHECK(back[i].label == d.examples[i].label);
  }
  CHECK(back[0].x.shape() == Shape{1, 28, 28});
  CHECK(load_mnist_idx(dir / "img.idx", dir / "lbl.idx", 7).size() == 7);
}

TEST_CASE("MNIST loader reports the failing byte offset") {
  const fs::path dir = scratch("idx_bad");
  const LoadedDataset d = make_synthetic_images({10, 1, 28, 28, 2, 4});
  write_mnist_idx(dir / "img.idx", dir / "lbl.idx", d.examples);
  auto bytes = slurp(dir / "img.idx");
  bytes[3] = 0x02;  // 2050 instead of 2051
  std::ofstream(dir / "img.idx", std::ios::binary) << bytes;
  try {
    load_mnist_idx(dir / "img.idx", dir / "lbl.idx");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  CHECK_THROWS_AS(load_mnist_idx(dir / "missing", dir / "lbl.idx"), DataError);
}

TEST_CASE("CIFAR zero record is standardized to -mean/std") {
  const fs::path dir = scratch("cifar");
  std::vector<unsigned char> bytes(2 * 3073, 0);
  bytes[0] = 3;
  bytes[3073] = 7;
  for (std::size_t k = 0; k < 3072; ++k) bytes[3073 + 1 + k] = static_cast<unsigned char>((k * 37) % 256);
  write_bytes(dir / "data_batch_1.bin", bytes);
  const LoadedDataset d = load_cifar10_binary({{dir / "data_batch_1.bin"}});
  REQUIRE(d.examples.size() == 2);
  CHECK(d.examples[0].label == 3);
  CHECK(d.examples[1].label == 7);
  CHECK(d.input_shape == Shape{3, 32, 32});
  for (std::size_t c = 0; c < 3; ++c) {
    const float expected = -d.channel_mean[c] / d.channel_std[c];
    CHECK(d.examples[0].x[c * 1024] == doctest::Approx(expected));
    CHECK(d.examples[0].x[c * 1024 + 1023] == doctest::Approx(expected));
  }
  bytes.push_back(1);
  write_bytes(dir / "bad.bin", bytes);
  CHECK_THROWS_AS(load_cifar10_binary({{dir / "bad.bin"}}), DataError);
}

TEST_CASE("MovieLens rows use the like threshold") {
  const fs::path dir = scratch("ml");
  std::ofstream(dir / "ratings.csv") << "userId,movieId,rating,timestamp\n1,2,5.0,964982703\n1,3,4.0,964982704\n";
  MovieLensCsv src{dir / "ratings.csv"};
  src.remap_ids = false;
  const LoadedDataset d = load_movielens_csv(src);
  REQUIRE(d.examples.size() == 2);
  CHECK(d.examples[0].x == Tensor::vec({1, 2}));
  CHECK(d.examples[0].label == 1);
  CHECK(d.examples[1].label == 0);
  src.remap_ids = true;
  const LoadedDataset r = load_movielens_csv(src);
  CHECK(r.examples[0].x == Tensor::vec({0, 0}));
  CHECK(r.examples[1].x == Tensor::vec({0, 1}));
  CHECK(r.num_users == 1);
  CHECK(r.num_movies == 2);

  std::ofstream(dir / "bad.csv") << "1,2,5.0\n1,x,3.0\n";
  try {
    load_movielens_csv({dir / "bad.csv"});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("synthetic generators are seeded") {
  const auto a = make_synthetic_images({10, 3, 16, 16, 5, 1});
  const auto b = make_synthetic_images({10, 3, 16, 16, 5, 1});
  const auto c = make_synthetic_images({10, 3, 16, 16, 5, 2});
  CHECK(a.examples[4].x == b.examples[4].x);
  CHECK(a.examples[4].x != c.examples[4].x);
  const auto r = make_synthetic_ratings({50, 60, 100, 1, 3});
  CHECK(r.num_users == 50);
  for (const auto& e : r.examples) {
    CHECK(e.x[0] < 50);
    CHECK(e.x[1] < 60);
  }
}

TEST_CASE("experiment spec parsing and validation") {
  const ExperimentSpec s = parse_experiment_spec(small_ssim_spec("out"));
  CHECK(s.recipe == Recipe::BiasedSsim);
  CHECK(s.model.name == "cnn-early");
  CHECK(s.dfil_grid == std::vector<double>{0.01, 1});
  CHECK(s.trials == 3);
  CHECK(std::holds_alternative<TvPrior>(s.attack.method));
  CHECK(std::get<SyntheticImages>(s.dataset).height == 16);

  CHECK(parse_experiment_spec(R"({"recipe": "unbiased-bound", "model": "mlp-1000"})").model.name == "mlp-1000");
  CHECK_THROWS_AS(parse_experiment_spec("{"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"recipe": "nope"})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"recipe": "utility", "bogus": 1})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"dfil_grid": [1, -2]})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"trials": 0})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"dataset": {"kind": "imagenet"}})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_experiment_spec(R"({"recipe": "utility"})"), std::invalid_argument);
}

TEST_CASE("trial seeds depend only on (seed, grid point, trial)") {
  CHECK(trial_seed(1, 2, 3) == trial_seed(1, 2, 3));
  CHECK(trial_seed(1, 2, 3) != trial_seed(1, 3, 2));
  CHECK(trial_seed(1, 2, 3) != trial_seed(2, 2, 3));
}

TEST_CASE("experiment reruns are byte identical and aggregates match the trials") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const ExperimentOutput out = run_experiment(parse_experiment_spec(small_ssim_spec(a)));
  run_experiment(parse_experiment_spec(small_ssim_spec(b)));
  CHECK(slurp(a / "results.csv") == slurp(b / "results.csv"));
  CHECK(fs::exists(a / "plot.svg"));

  const ResultsTable t = read_results_csv(a / "results.csv");
  const auto col = [&](const std::string& m) {
    return static_cast<std::size_t>(std::find(t.metrics.begin(), t.metrics.end(), m) - t.metrics.begin());
  };
  const std::size_t ssim_col = col("ssim");
  REQUIRE(ssim_col < t.metrics.size());
  for (double g : {0.01, 1.0}) {
    std::vector<double> vals;
    std::optional<double> mean, se;
    for (const auto& r : t.rows) {
      if (r.inv_dfil != g) continue;
      if (r.kind == "trial" && r.status == "ok") vals.push_back(*r.values[ssim_col]);
      if (r.kind == "mean") mean = r.values[ssim_col];
      if (r.kind == "stderr") se = r.values[ssim_col];
    }
    REQUIRE(vals.size() == 3);
    double m = 0;
    for (double v : vals) m += v / 3.0;
    double ss = 0;
    for (double v : vals) ss += (v - m) * (v - m);
    CHECK(*mean == doctest::Approx(m).epsilon(1e-12));
    CHECK(*se == doctest::Approx(std::sqrt(ss / 2.0) / std::sqrt(3.0)).epsilon(1e-12));
  }
  CHECK(out.results.rows.size() == 6 + 4);
}

TEST_CASE("failed trials are recorded and do not stop the run") {
  const fs::path dir = scratch("fail");
  ExperimentSpec s = parse_experiment_spec(small_ssim_spec(dir));
  s.attack.optimizer.lr = std::numeric_limits<double>::infinity();
  s.dfil_grid = {1.0};
  const ExperimentOutput out = run_experiment(s);
  std::size_t errors = 0;
  for (const auto& r : out.results.rows)
    if (r.kind == "trial" && r.status.rfind("error", 0) == 0) ++errors;
  CHECK(errors == 3);
  CHECK(fs::exists(dir / "results.csv"));
  const auto pts = summarize(read_results_csv(dir / "results.csv"));
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].failures == 3);
}

TEST_CASE("results csv round trip and number formatting") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -0.0}) CHECK(std::stod(format_number(v)) == v);
  CHECK(format_number(std::nan("")) == "nan");
  ResultsTable t{{"mse", "ssim"}, {}};
  t.rows.push_back({"trial", 0.1, 0, {0.5, std::nullopt}, "ok"});
  t.rows.push_back({"trial", 0.1, 1, {0.7, 0.2}, "ok"});
  t.rows.push_back({"trial", 10, 0, {std::nullopt, std::nullopt}, "error: boom"});
  const fs::path dir = scratch("csv");
  write_results_csv(dir / "results.csv", with_aggregates(t));
  const ResultsTable back = read_results_csv(dir / "results.csv");
  CHECK(back.metrics == t.metrics);
  REQUIRE(back.rows.size() == 3 + 4);
  CHECK(back.rows[1].values[1] == 0.2);
  CHECK_FALSE(back.rows[0].values[1].has_value());
  CHECK(back.rows[2].status == "error: boom");
  std::ofstream(dir / "bad.csv") << "row,inv_dfil,trial,mse,status\ntrial,x,0,1,ok\n";
  try {
    read_results_csv(dir / "bad.csv");
    FAIL("expected ReportError");
  } catch (const ReportError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_results_csv(dir / "absent.csv"), ReportError);
}

TEST_CASE("report on empty and single-point results") {
  const fs::path empty = scratch("report_empty");
  write_results_csv(empty / "results.csv", ResultsTable{{"mse"}, {}});
  std::ostringstream out;
  const ReportSummary s = report(empty, out);
  CHECK(s.empty);
  CHECK(out.str().find("warning") != std::string::npos);
  CHECK(slurp(empty / "plot.svg").find("no data") != std::string::npos);

  const fs::path one = scratch("report_one");
  ResultsTable t{{"mse"}, {}};
  t.rows.push_back({"trial", 1.0, 0, {2.0}, "ok"});
  write_results_csv(one / "results.csv", with_aggregates(t));
  std::ostringstream out1;
  const ReportSummary s1 = report(one, out1);
  REQUIRE(s1.points.size() == 1);
  CHECK(*s1.points[0].mean[0] == 2.0);
  CHECK(*s1.points[0].stderr_[0] == 0.0);
  const std::string svg = slurp(one / "plot.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}
