#pragma once

#include "flowood/dataset.hpp"
#include "flowood/glow.hpp"
#include "flowood/waveletflow.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace flowood {

struct ScoreRecord {
    std::string id;
    std::string split; // train / test / ood by convention; any label works
    double nll_nats = 0.0;
    double bpd = 0.0;
};

struct RocPoint {
    double threshold = 0.0; // predict in-distribution when score >= threshold
    double fpr = 0.0;
    double tpr = 0.0;
};

struct OodReport {
    std::vector<ScoreRecord> records;
    std::vector<RocPoint> roc;
    double auc = 0.0;
};

struct ScoreOptions {
    std::string split_label = "test";
    std::uint64_t seed = 0;
    double sigma = 0.0;    // noise std applied before scoring; 0 = off
    bool additive = false; // x + eps instead of x * (1 + eps)
    int threads = 0;       // 0 = hardware concurrency
};

// x * (1 + eps) (or x + eps), eps ~ N(0, sigma^2) i.i.d. per element, result
// clamped to [0,1]. The input is expected in [0,1].
Tensor perturb_multiplicative(const Tensor& img01, double sigma, std::uint64_t seed);
Tensor perturb_additive(const Tensor& img01, double sigma, std::uint64_t seed);

// One record per dataset item, in dataset order (ids are already sorted).
// Dequantization noise is a fixed per-item stream derived from opt.seed, so
// rescoring is bit-identical. A nonzero sigma perturbs the image in [0,1]
// and requantizes to 8-bit before scoring, the same pipeline a noisy image
// written to disk would go through. Items with a non-finite likelihood are
// reported in `warnings` and skipped.
std::vector<ScoreRecord> score_dataset(GlowModel& model, const Dataset& data, const ScoreOptions& opt,
                                       std::vector<std::string>* warnings = nullptr);
std::vector<ScoreRecord> score_dataset(WaveletFlowModel& model, const Dataset& data, const ScoreOptions& opt,
                                       std::vector<std::string>* warnings = nullptr);

// Threshold sweep over the pooled distinct scores, higher score = more
// in-distribution. The curve starts at (0,0) and ends at (1,1); tied scores
// move both rates at once, so ties show up as diagonal segments and the
// trapezoidal AUC equals the Mann-Whitney statistic with ties worth one
// half.
std::pair<std::vector<RocPoint>, double> roc_auc(const std::vector<double>& scores_in,
                                                 const std::vector<double>& scores_out);

// Splits records by label and runs roc_auc on the log-likelihoods (-nll).
// Positive class = in-distribution (the in_split records).
OodReport build_report(std::vector<ScoreRecord> records, const std::string& in_split,
                       const std::string& out_split);

struct LevelSweepCell {
    std::int64_t level = 0;
    double sigma = 0.0;
    std::vector<double> bpds; // per item, dataset order
    double mean_bpd = 0.0;
    std::vector<double> bin_edges;     // bins + 1 edges, linear
    std::vector<std::int64_t> counts;  // per bin, sums to item count
};

// Per-level BPD histograms under each noise level. Levels 0..n-1 are the
// detail stacks, level n the base; level BPD divides by that level's own
// coefficient count and carries no dequantization correction. The sigma = 0
// cells coincide with plain per-level scoring under the same seed.
std::vector<LevelSweepCell> per_level_sweep(WaveletFlowModel& model, const Dataset& data,
                                            const std::vector<double>& sigmas, const ScoreOptions& opt,
                                            int bins = 20);

struct PsdCurve {
    std::vector<double> mean_power;             // per integer radius, DC at 0
    std::vector<std::int64_t> level_boundaries; // radii N/2^(k+1), descending
    double total_power = 0.0; // sum of per-cell power, mean over images
    double mean_energy = 0.0; // sum of squared samples, mean over images
};

// 2-D DFT power |F|^2/N^2 of the luminance (channel mean) of each image,
// binned at integer radii over folded frequencies and averaged over the set.
// Images must share one square [C,N,N] shape. total_power == mean_energy is
// Parseval for this scaling.
PsdCurve average_psd(const std::vector<Tensor>& images);

// CSV surfaces:
//   scores.csv  id,split,nll_nats,bpd
//   roc.csv     threshold,fpr,tpr + trailing "# auc=<value>" line
//   levels.csv  level,sigma,bin_left,bin_right,count
//   psd.csv     radius,mean_power + "# level_boundary=<radius>" lines
void write_scores_csv(const std::string& path, const std::vector<ScoreRecord>& records);
std::vector<ScoreRecord> read_scores_csv(const std::string& path);
void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc, double auc);
void write_levels_csv(const std::string& path, const std::vector<LevelSweepCell>& cells);
void write_psd_csv(const std::string& path, const PsdCurve& curve);

} // namespace flowood
