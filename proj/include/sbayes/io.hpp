#ifndef SBAYES_IO_HPP
#define SBAYES_IO_HPP

#include "sbayes/common.hpp"
#include "sbayes/coreset.hpp"
#include "sbayes/distributed.hpp"
#include "sbayes/mcmc.hpp"
#include "sbayes/model.hpp"
#include "sbayes/varinf.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace sbayes {

namespace fs = std::filesystem;
using Json = nlohmann::json;

/// Shortest decimal that round-trips.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(*b))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(e[-1]))) --e;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw InputError("cannot parse number '" + s + "' in " + where);
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

// ---------------------------------------------------------------- files

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << s;
  if (!out) throw InputError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Output directory built under a temporary sibling and renamed into place on commit.
/// Destroying an uncommitted directory removes everything written so far.
class AtomicOutputDir {
 public:
  explicit AtomicOutputDir(fs::path final_dir) : final_(std::move(final_dir)) {
    if (fs::exists(final_) && !(fs::is_directory(final_) && fs::is_empty(final_)))
      throw ConfigError("output path " + final_.string() + " already exists and is not an empty directory");
    const fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
    fs::create_directories(parent);
    for (int i = 0;; ++i) {
      tmp_ = parent / ("." + final_.filename().string() + ".partial-" + std::to_string(i));
      if (fs::create_directory(tmp_)) break;
      if (i > 1000) throw NumericError("cannot create a temporary output directory next to " + final_.string());
    }
  }
  AtomicOutputDir(const AtomicOutputDir&) = delete;
  AtomicOutputDir& operator=(const AtomicOutputDir&) = delete;
  ~AtomicOutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }

  const fs::path& path() const { return tmp_; }
  fs::path operator/(const std::string& name) const { return tmp_ / name; }

  void commit() {
    if (fs::exists(final_)) fs::remove(final_);  // empty directory, checked in the constructor
    fs::rename(tmp_, final_);
    committed_ = true;
  }

 private:
  fs::path final_, tmp_;
  bool committed_ = false;
};

// ---------------------------------------------------------------- matrices

inline void write_matrix_csv(std::ostream& out, const Matrix& m, const std::string& prefix = "x") {
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << prefix << c;
  out << '\n';
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_double(m(r, c));
    out << '\n';
  }
}

inline Matrix read_matrix_csv(std::istream& in, const std::string& where) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty CSV: " + where);
  const std::size_t cols = split_csv(line).size();
  std::vector<double> vals;
  Eigen::Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != cols) throw InputError("ragged row " + std::to_string(rows + 2) + " in " + where);
    for (const auto& c : cells) vals.push_back(parse_double(c, where));
    ++rows;
  }
  Matrix m(rows, static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = vals[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

// ---------------------------------------------------------------- chains

/// One JSON record per step: step, x, accept, log_alpha, divergent.
inline void write_chain_jsonl(std::ostream& out, const Chain& c) {
  require(static_cast<std::size_t>(c.draws.rows()) == c.records.size(), "chain draws and records disagree in length");
  for (std::size_t t = 0; t < c.records.size(); ++t) {
    const auto& r = c.records[t];
    Json x = Json::array();
    for (Eigen::Index j = 0; j < c.draws.cols(); ++j) x.push_back(c.draws(static_cast<Eigen::Index>(t), j));
    Json rec{{"step", r.step}, {"x", x}, {"accept", r.accepted}, {"divergent", r.divergent}};
    // JSON has no infinities; a certain rejection is written as null
    rec["log_alpha"] = std::isfinite(r.log_alpha) ? Json(r.log_alpha) : Json(nullptr);
    out << rec.dump() << '\n';
  }
}

inline Chain read_chain_jsonl(std::istream& in, const std::string& where) {
  std::vector<std::vector<double>> xs;
  Chain c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const Json rec = Json::parse(line);
      StepRecord r;
      r.step = rec.at("step").get<std::int64_t>();
      r.accepted = rec.at("accept").get<bool>();
      r.divergent = rec.at("divergent").get<bool>();
      r.log_alpha = rec.at("log_alpha").is_null() ? -std::numeric_limits<double>::infinity()
                                                  : rec.at("log_alpha").get<double>();
      xs.push_back(rec.at("x").get<std::vector<double>>());
      c.records.push_back(r);
    } catch (const Json::exception& e) {
      throw InputError(where + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (xs.back().size() != xs.front().size()) throw InputError(where + ": state dimension changes on line " + std::to_string(line_no));
  }
  require(!xs.empty(), where + " contains no chain records");
  c.draws.resize(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(xs.front().size()));
  for (std::size_t t = 0; t < xs.size(); ++t)
    for (std::size_t j = 0; j < xs[t].size(); ++j) c.draws(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = xs[t][j];
  return c;
}

// ---------------------------------------------------------------- coresets

/// FNV-1a over the likelihood family, prior scale and data bytes.
inline std::string model_hash(const BayesModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  const auto tag = static_cast<std::uint64_t>(m.likelihood().index());
  mix(&tag, sizeof tag);
  if (const auto* l = std::get_if<GaussianLinearLik>(&m.likelihood())) mix(&l->noise_sd, sizeof(double));
  const double s = m.prior_scale();
  mix(&s, sizeof s);
  const Matrix& x = m.data().rows();
  const std::uint64_t shape[2] = {static_cast<std::uint64_t>(x.rows()), static_cast<std::uint64_t>(x.cols())};
  mix(shape, sizeof shape);
  mix(x.data(), sizeof(double) * static_cast<std::size_t>(x.size()));
  if (m.data().has_labels()) {
    const Vector& y = m.data().labels();
    mix(y.data(), sizeof(double) * static_cast<std::size_t>(y.size()));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct CoresetFile {
  CoresetWeights weights;
  std::string model_hash;
};

inline void write_coreset_csv(std::ostream& out, const CoresetWeights& w, const std::string& hash) {
  const auto support = w.support();
  out << "# N=" << w.w.size() << "\n# M=" << support.size() << "\n# model_hash=" << hash << "\nindex,weight\n";
  for (auto n : support) out << n << ',' << format_double(w.w[n]) << '\n';
}

inline CoresetFile read_coreset_csv(std::istream& in, const std::string& where) {
  std::string line;
  long long n = -1, m = -1;
  CoresetFile f;
  while (std::getline(in, line) && line.rfind('#', 0) == 0) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(1, eq - 1);
    key.erase(std::remove_if(key.begin(), key.end(), [](unsigned char c) { return std::isspace(c); }), key.end());
    const std::string val = line.substr(eq + 1);
    if (key == "N") n = std::stoll(val);
    if (key == "M") m = std::stoll(val);
    if (key == "model_hash") f.model_hash = val;
  }
  if (n < 1 || m < 0 || f.model_hash.empty()) throw InputError(where + ": coreset header needs N, M and model_hash");
  if (line != "index,weight") throw InputError(where + ": expected the column header 'index,weight'");
  f.weights.w = Vector::Zero(n);
  long long rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 2) throw InputError(where + ": coreset rows have two cells");
    const long long idx = std::stoll(cells[0]);
    if (idx < 0 || idx >= n) throw InputError(where + ": index " + cells[0] + " outside [0, N)");
    f.weights.w[idx] = parse_double(cells[1], where);
    ++rows;
  }
  if (rows != m) throw InputError(where + ": header says M=" + std::to_string(m) + " but file has " + std::to_string(rows) + " rows");
  return f;
}

// ---------------------------------------------------------------- worker draws

inline const char* to_string(SubsetMode m) {
  return m == SubsetMode::kTemperedPrior ? "tempered_prior" : "powered_likelihood";
}

inline SubsetMode parse_subset_mode(const std::string& s) {
  if (s == "tempered_prior") return SubsetMode::kTemperedPrior;
  if (s == "powered_likelihood") return SubsetMode::kPoweredLikelihood;
  throw ConfigError("unknown subset mode '" + s + "' (expected tempered_prior or powered_likelihood)");
}

/// subset_<j>.csv per worker plus manifest.json with K, T, mode and seeds.
inline void write_worker_draws(const fs::path& dir, const WorkerDraws& wd) {
  wd.validate();
  fs::create_directories(dir);
  for (int j = 0; j < wd.k(); ++j) {
    std::ostringstream s;
    write_matrix_csv(s, wd.draws[static_cast<std::size_t>(j)]);
    write_text(dir / ("subset_" + std::to_string(j) + ".csv"), s.str());
  }
  const Json manifest{{"K", wd.k()}, {"T", wd.t()}, {"mode", to_string(wd.mode)}, {"seeds", wd.seeds}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline WorkerDraws read_worker_draws(const fs::path& dir) {
  const Json manifest = Json::parse(read_text(dir / "manifest.json"));
  WorkerDraws wd;
  wd.mode = parse_subset_mode(manifest.at("mode").get<std::string>());
  wd.seeds = manifest.at("seeds").get<std::vector<std::uint64_t>>();
  const int k = manifest.at("K").get<int>();
  for (int j = 0; j < k; ++j) {
    const fs::path p = dir / ("subset_" + std::to_string(j) + ".csv");
    std::istringstream in(read_text(p));
    wd.draws.push_back(read_matrix_csv(in, p.string()));
  }
  wd.validate();
  require(wd.t() == manifest.at("T").get<Eigen::Index>(), "worker draw files disagree with the manifest's T");
  return wd;
}

// ---------------------------------------------------------------- variational state

/// factor,family,eta1,eta2 with normal (m/v, -1/(2v)) and gamma (a-1, -b) natural parameters.
inline void write_vb_state_csv(std::ostream& out, const MeanFieldState& q) {
  out << "factor,family,eta1,eta2\n";
  for (std::size_t j = 0; j < q.factors.size(); ++j) {
    if (const auto* n = std::get_if<NormalFactor>(&q.factors[j]))
      out << j << ",normal," << format_double(n->mean / n->var) << ',' << format_double(-0.5 / n->var) << '\n';
    else {
      const auto& g = std::get<GammaFactor>(q.factors[j]);
      out << j << ",gamma," << format_double(g.shape - 1) << ',' << format_double(-g.rate) << '\n';
    }
  }
}

inline MeanFieldState read_vb_state_csv(std::istream& in, const std::string& where) {
  std::string line;
  if (!std::getline(in, line) || line != "factor,family,eta1,eta2") throw InputError(where + ": bad header");
  MeanFieldState q;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 4) throw InputError(where + ": rows have four cells");
    const double e1 = parse_double(c[2], where), e2 = parse_double(c[3], where);
    if (c[1] == "normal") {
      require(e2 < 0, where + ": normal factor needs eta2 < 0");
      const double v = -0.5 / e2;
      q.factors.emplace_back(NormalFactor{e1 * v, v});
    } else if (c[1] == "gamma") {
      q.factors.emplace_back(GammaFactor{e1 + 1, -e2});
    } else {
      throw InputError(where + ": unknown factor family '" + c[1] + "'");
    }
  }
  return q;
}

}  // namespace sbayes

#endif  // SBAYES_IO_HPP
