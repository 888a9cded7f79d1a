#ifndef SBAYES_DATASET_HPP
#define SBAYES_DATASET_HPP

#include "sbayes/common.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sbayes {

/// Immutable N x d observation matrix with optional label column.
///
/// Copies share storage. Every `row()`/`label()` call bumps a shared read
/// counter so tests can audit which shards a worker touched.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(Matrix rows, std::optional<Vector> labels = std::nullopt)
      : store_(std::make_shared<Store>()) {
    require(rows.rows() >= 1, "dataset needs at least one observation");
    require(rows.allFinite(), "dataset entries must be finite");
    if (labels) {
      require(labels->size() == rows.rows(), "label count must match row count");
      require(labels->allFinite(), "labels must be finite");
    }
    store_->rows = std::move(rows);
    store_->labels = std::move(labels);
  }

  Eigen::Index n_obs() const { return store_ ? store_->rows.rows() : 0; }
  Eigen::Index obs_dim() const { return store_ ? store_->rows.cols() : 0; }
  bool has_labels() const { return store_ && store_->labels.has_value(); }

  auto row(Eigen::Index n) const {
    store_->reads.fetch_add(1, std::memory_order_relaxed);
    return store_->rows.row(n);
  }

  double label(Eigen::Index n) const {
    store_->reads.fetch_add(1, std::memory_order_relaxed);
    return (*store_->labels)[n];
  }

  /// Bulk access; counted as one read.
  const Matrix& rows() const {
    store_->reads.fetch_add(1, std::memory_order_relaxed);
    return store_->rows;
  }

  const Vector& labels() const {
    require(has_labels(), "dataset has no label column");
    store_->reads.fetch_add(1, std::memory_order_relaxed);
    return *store_->labels;
  }

  std::uint64_t reads() const { return store_ ? store_->reads.load() : 0; }

  /// New dataset (fresh storage and counter) holding the given rows in order.
  Dataset select(const std::vector<Eigen::Index>& idx) const {
    Matrix out(static_cast<Eigen::Index>(idx.size()), obs_dim());
    std::optional<Vector> lab;
    if (has_labels()) lab = Vector(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = store_->rows.row(idx[i]);
      if (lab) (*lab)[static_cast<Eigen::Index>(i)] = (*store_->labels)[idx[i]];
    }
    return Dataset(std::move(out), std::move(lab));
  }

 private:
  struct Store {
    Matrix rows;
    std::optional<Vector> labels;
    mutable std::atomic<std::uint64_t> reads{0};
  };
  std::shared_ptr<Store> store_;
};

/// Index sets of a seeded random partition into K equal shards.
/// K = 1 returns the identity ordering.
inline std::vector<std::vector<Eigen::Index>> partition_indices(Eigen::Index n, int k, std::uint64_t seed) {
  require(k >= 1, "partition count must be positive");
  require(n % k == 0, "partition count K=" + std::to_string(k) + " must divide N=" + std::to_string(n));
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  if (k > 1) {
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  const auto m = static_cast<std::size_t>(n / k);
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(k));
  for (std::size_t j = 0; j < out.size(); ++j) out[j].assign(perm.begin() + j * m, perm.begin() + (j + 1) * m);
  return out;
}

inline std::vector<Dataset> partition(const Dataset& data, int k, std::uint64_t seed) {
  std::vector<Dataset> shards;
  for (const auto& idx : partition_indices(data.n_obs(), k, seed)) shards.push_back(data.select(idx));
  return shards;
}

/// Uniform minibatch of size n from [0, N) without replacement (partial Fisher-Yates).
inline std::vector<Eigen::Index> draw_minibatch(Eigen::Index n_total, Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_total));
  std::iota(idx.begin(), idx.end(), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n_total - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

/// Parse CSV with a header row. A column named "y" becomes the label column.
inline Dataset parse_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty dataset CSV");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(std::remove_if(cell.begin(), cell.end(), [](unsigned char c) { return std::isspace(c); }), cell.end());
      header.push_back(cell);
    }
  }
  const auto y_col = std::find(header.begin(), header.end(), "y") - header.begin();
  const bool has_y = y_col < static_cast<std::ptrdiff_t>(header.size());
  const auto n_feat = static_cast<Eigen::Index>(header.size()) - (has_y ? 1 : 0);
  require(n_feat >= 1, "dataset CSV needs at least one non-label column");

  std::vector<std::vector<double>> feats;
  std::vector<double> ys;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw InputError("non-numeric cell '" + cell + "' on line " + std::to_string(line_no));
      }
    }
    if (vals.size() != header.size())
      throw InputError("line " + std::to_string(line_no) + " has " + std::to_string(vals.size()) + " cells, expected " +
                       std::to_string(header.size()));
    std::vector<double> f;
    for (std::size_t c = 0; c < vals.size(); ++c) {
      if (has_y && static_cast<std::ptrdiff_t>(c) == y_col)
        ys.push_back(vals[c]);
      else
        f.push_back(vals[c]);
    }
    feats.push_back(std::move(f));
  }
  require(!feats.empty(), "dataset CSV has no observations");
  Matrix rows(static_cast<Eigen::Index>(feats.size()), n_feat);
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (Eigen::Index c = 0; c < n_feat; ++c) rows(static_cast<Eigen::Index>(i), c) = feats[i][static_cast<std::size_t>(c)];
  std::optional<Vector> labels;
  if (has_y) labels = Eigen::Map<const Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  return Dataset(std::move(rows), std::move(labels));
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset file " + path);
  return parse_dataset_csv(in);
}

}  // namespace sbayes

#endif  // SBAYES_DATASET_HPP
