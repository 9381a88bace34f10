#pragma once

// Cross-dataset generalisation: train on each source's train split, score every
// target's test split.

#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenmil/dataset.hpp"
#include "tokenmil/evaluation.hpp"
#include "tokenmil/rng.hpp"
#include "tokenmil/training.hpp"

namespace tokenmil {

struct CrossDatasetMatrix {
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;
  std::vector<std::vector<std::optional<double>>> auroc;  // [train][eval]

  double diagonal_mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < auroc.size() && i < eval_ids.size(); ++i)
      if (auroc[i][i]) {
        s += *auroc[i][i];
        ++n;
      }
    return n ? s / static_cast<double>(n) : 0.0;
  }

  double off_diagonal_mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < auroc.size(); ++i)
      for (std::size_t j = 0; j < auroc[i].size(); ++j)
        if (i != j && auroc[i][j]) {
          s += *auroc[i][j];
          ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

inline nlohmann::json to_json(const CrossDatasetMatrix& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t i = 0; i < m.auroc.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& c : m.auroc[i]) row.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
    cells.push_back(std::move(row));
  }
  return {{"train_ids", m.train_ids}, {"eval_ids", m.eval_ids}, {"auroc", std::move(cells)}, {"diagonal", "within-dataset"}};
}

/// CSV grid: header "train\eval,<eval ids>", one row per training dataset, empty cell when absent.
inline std::string to_csv(const CrossDatasetMatrix& m) {
  std::ostringstream out;
  out.precision(17);
  out << "train\\eval";
  for (const auto& e : m.eval_ids) out << ',' << e;
  out << '\n';
  for (std::size_t i = 0; i < m.train_ids.size(); ++i) {
    out << m.train_ids[i];
    for (const auto& c : m.auroc[i]) {
      out << ',';
      if (c) out << *c;
    }
    out << '\n';
  }
  return out.str();
}

/// Every ordered (source, target) pair; the diagonal is within-dataset AUROC.
/// Source i trains with seed child_seed(config.seed, i).
inline CrossDatasetMatrix cross_eval(std::span<const Dataset> datasets, const TrainConfig& config) {
  if (datasets.size() < 2) throw DataError("cross_eval: need at least 2 datasets");
  const std::size_t d = datasets.front().manifest.dim;
  for (const auto& ds : datasets)
    if (ds.manifest.dim != d)
      throw DataError("cross_eval: dimension mismatch between '" + datasets.front().manifest.dataset_id +
                      "' and '" + ds.manifest.dataset_id + "'");
  CrossDatasetMatrix m;
  for (const auto& ds : datasets) {
    m.train_ids.push_back(ds.manifest.dataset_id);
    m.eval_ids.push_back(ds.manifest.dataset_id);
  }
  m.auroc.assign(datasets.size(), std::vector<std::optional<double>>(datasets.size()));
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    TrainConfig cell = config;
    cell.seed = child_seed(config.seed, i);
    const auto trained = train(datasets[i], cell);
    for (std::size_t j = 0; j < datasets.size(); ++j)
      m.auroc[i][j] = evaluate(trained.params, datasets[j], Split::test, config.selection, config.augmentation).auroc;
  }
  return m;
}

}  // namespace tokenmil
