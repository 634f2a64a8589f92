#include "flowood/ood.hpp"

#include "flowood/errors.hpp"
#include "flowood/format.hpp"
#include "flowood/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

namespace flowood {

namespace {

constexpr std::uint64_t kPerturbTag = 0xA1;
constexpr std::uint64_t kSweepPerturbTag = 0xB0;

Tensor perturb_impl(const Tensor& img01, double sigma, std::uint64_t seed, bool additive) {
    if (sigma < 0.0) throw ValueError("perturbation sigma must be >= 0");
    Tensor out = img01.detach();
    if (sigma == 0.0) return out;
    Rng rng(seed);
    for (auto& v : out.data()) {
        const double eps = sigma * rng.normal();
        v = additive ? v + eps : v * (1.0 + eps);
        v = std::min(1.0, std::max(0.0, v));
    }
    return out;
}

// Quantized item -> [1,C,H,W] model input: optional noise in [0,1] with
// 8-bit requantization, then fixed-stream dequantization.
Tensor prepare_item(const Tensor& item, const Shape& item_shape, const ScoreOptions& opt,
                    std::uint64_t perturb_seed, std::uint64_t dequant_seed, int quantization_levels) {
    Tensor x({1, item_shape[0], item_shape[1], item_shape[2]});
    auto dst = x.data();
    auto src = item.data();
    std::copy(src.begin(), src.end(), dst.begin());

    const double top = static_cast<double>(quantization_levels - 1);
    if (opt.sigma > 0.0) {
        for (auto& v : dst) v /= top;
        Tensor noisy = opt.additive ? perturb_additive(x, opt.sigma, perturb_seed)
                                    : perturb_multiplicative(x, opt.sigma, perturb_seed);
        auto nv = noisy.data();
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst[i] = static_cast<double>(std::lround(nv[i] * top));
    }

    Rng noise(dequant_seed);
    const double q = static_cast<double>(quantization_levels);
    for (auto& v : dst) v = (v + noise.uniform()) / q;
    return x;
}

std::vector<ScoreRecord> score_common(const std::function<Tensor(const Tensor&)>& loglik,
                                      std::int64_t data_dim, int quantization_levels, const Dataset& data,
                                      const ScoreOptions& opt, std::vector<std::string>* warnings) {
    if (data.size() == 0) throw ValueError("score_dataset: empty dataset");
    const std::size_t n = data.size();
    std::vector<ScoreRecord> records(n);
    std::vector<char> ok(n, 0);
    std::vector<std::string> item_warnings(n);
    const double denom = static_cast<double>(data_dim) * std::numbers::ln2;

    int threads = opt.threads;
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    threads = std::min<int>(threads, static_cast<int>(n));

    std::atomic<std::size_t> cursor{0};
    auto worker = [&] {
        NoGradGuard ng; // grad mode is thread-local; keeps workers read-only
        for (;;) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= n) break;
            Tensor x = prepare_item(data.items[i], data.item_shape, opt, mix_seed(opt.seed, kPerturbTag, i),
                                    mix_seed(opt.seed, i), quantization_levels);
            const double ll = loglik(x).item();
            if (!std::isfinite(ll)) {
                item_warnings[i] = data.ids[i] + ": non-finite likelihood, skipped";
                continue;
            }
            records[i] = ScoreRecord{data.ids[i], opt.split_label, -ll, -ll / denom};
            ok[i] = 1;
        }
    };

    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<ScoreRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (ok[i])
            out.push_back(std::move(records[i]));
        else if (warnings)
            warnings->push_back(item_warnings[i]);
    }
    return out;
}

void histogram(LevelSweepCell& cell, int bins) {
    double lo = *std::min_element(cell.bpds.begin(), cell.bpds.end());
    double hi = *std::max_element(cell.bpds.begin(), cell.bpds.end());
    if (!(hi > lo)) hi = lo + 1.0; // all identical: one occupied bin
    cell.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b)
        cell.bin_edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
    cell.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double v : cell.bpds) {
        auto b = static_cast<std::int64_t>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::min<std::int64_t>(std::max<std::int64_t>(b, 0), bins - 1);
        ++cell.counts[static_cast<std::size_t>(b)];
    }
}

} // namespace

Tensor perturb_multiplicative(const Tensor& img01, double sigma, std::uint64_t seed) {
    return perturb_impl(img01, sigma, seed, false);
}

Tensor perturb_additive(const Tensor& img01, double sigma, std::uint64_t seed) {
    return perturb_impl(img01, sigma, seed, true);
}

std::vector<ScoreRecord> score_dataset(GlowModel& model, const Dataset& data, const ScoreOptions& opt,
                                       std::vector<std::string>* warnings) {
    if (data.item_shape != model.config().image_shape)
        throw ShapeError("score_dataset: items " + shape_str(data.item_shape) + " do not match model shape " +
                         shape_str(model.config().image_shape));
    return score_common([&model](const Tensor& x) { return model.log_likelihood(x); }, model.data_dim(),
                        model.config().quantization_levels, data, opt, warnings);
}

std::vector<ScoreRecord> score_dataset(WaveletFlowModel& model, const Dataset& data, const ScoreOptions& opt,
                                       std::vector<std::string>* warnings) {
    if (data.item_shape != model.image_shape())
        throw ShapeError("score_dataset: items " + shape_str(data.item_shape) + " do not match model shape " +
                         shape_str(model.image_shape()));
    return score_common([&model](const Tensor& x) { return model.total_log_likelihood(x); },
                        model.data_dim(), model.config().quantization_levels, data, opt, warnings);
}

std::pair<std::vector<RocPoint>, double> roc_auc(const std::vector<double>& scores_in,
                                                 const std::vector<double>& scores_out) {
    if (scores_in.empty() || scores_out.empty())
        throw ValueError("roc_auc: both score lists must be nonempty");
    for (double v : scores_in)
        if (std::isnan(v)) throw ValueError("roc_auc: NaN score in the in-distribution list");
    for (double v : scores_out)
        if (std::isnan(v)) throw ValueError("roc_auc: NaN score in the out-of-distribution list");

    std::vector<double> in = scores_in, out = scores_out;
    std::sort(in.begin(), in.end(), std::greater<>());
    std::sort(out.begin(), out.end(), std::greater<>());
    std::vector<double> thresholds;
    thresholds.reserve(in.size() + out.size());
    std::merge(in.begin(), in.end(), out.begin(), out.end(), std::back_inserter(thresholds),
               std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    const double n_in = static_cast<double>(in.size());
    const double n_out = static_cast<double>(out.size());
    std::vector<RocPoint> roc;
    roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t ti = 0, to = 0;
    for (double t : thresholds) {
        while (ti < in.size() && in[ti] >= t) ++ti;
        while (to < out.size() && out[to] >= t) ++to;
        roc.push_back({t, static_cast<double>(to) / n_out, static_cast<double>(ti) / n_in});
    }
    // the final threshold is the minimum score, so the curve always ends at (1,1)

    double auc = 0.0;
    for (std::size_t i = 1; i < roc.size(); ++i)
        auc += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) * 0.5;
    return {std::move(roc), auc};
}

OodReport build_report(std::vector<ScoreRecord> records, const std::string& in_split,
                       const std::string& out_split) {
    std::vector<double> in, out;
    for (const auto& r : records) {
        if (r.split == in_split) in.push_back(-r.nll_nats);
        if (r.split == out_split) out.push_back(-r.nll_nats);
    }
    if (in.empty()) throw ValueError("build_report: no records with split '" + in_split + "'");
    if (out.empty()) throw ValueError("build_report: no records with split '" + out_split + "'");
    OodReport rep;
    rep.records = std::move(records);
    auto [roc, auc] = roc_auc(in, out);
    rep.roc = std::move(roc);
    rep.auc = auc;
    return rep;
}

std::vector<LevelSweepCell> per_level_sweep(WaveletFlowModel& model, const Dataset& data,
                                            const std::vector<double>& sigmas, const ScoreOptions& opt,
                                            int bins) {
    if (data.size() == 0) throw ValueError("per_level_sweep: empty dataset");
    if (sigmas.empty()) throw ValueError("per_level_sweep: no sigma values");
    if (bins < 1) throw ValueError("per_level_sweep: bins must be >= 1");
    if (data.item_shape != model.image_shape())
        throw ShapeError("per_level_sweep: items " + shape_str(data.item_shape) +
                         " do not match model shape " + shape_str(model.image_shape()));

    NoGradGuard ng;
    const std::size_t n = data.size();
    const std::int64_t n_levels = model.n_levels();
    const int q = model.config().quantization_levels;
    constexpr std::size_t kBatch = 32;

    std::vector<LevelSweepCell> cells;
    for (std::size_t si = 0; si < sigmas.size(); ++si) {
        ScoreOptions item_opt = opt;
        item_opt.sigma = sigmas[si];
        std::vector<LevelSweepCell> row(static_cast<std::size_t>(n_levels) + 1);
        for (std::int64_t l = 0; l <= n_levels; ++l) {
            row[static_cast<std::size_t>(l)].level = l;
            row[static_cast<std::size_t>(l)].sigma = sigmas[si];
        }

        for (std::size_t start = 0; start < n; start += kBatch) {
            const std::size_t stop = std::min(n, start + kBatch);
            const auto count = static_cast<std::int64_t>(stop - start);
            Tensor batch({count, data.item_shape[0], data.item_shape[1], data.item_shape[2]});
            auto dst = batch.data();
            const std::size_t per = static_cast<std::size_t>(shape_numel(data.item_shape));
            for (std::size_t i = start; i < stop; ++i) {
                Tensor x = prepare_item(data.items[i], data.item_shape, item_opt,
                                        mix_seed(opt.seed, kSweepPerturbTag + si, i), mix_seed(opt.seed, i), q);
                auto sv = x.data();
                std::copy(sv.begin(), sv.end(), dst.begin() + static_cast<std::ptrdiff_t>((i - start) * per));
            }
            for (std::int64_t l = 0; l <= n_levels; ++l) {
                Tensor ll = model.per_level_log_likelihood(batch, l);
                const double denom = static_cast<double>(model.level_coeff_count(l)) * std::numbers::ln2;
                for (std::int64_t j = 0; j < count; ++j)
                    row[static_cast<std::size_t>(l)].bpds.push_back(-ll.at(j) / denom);
            }
        }

        for (auto& cell : row) {
            double sum = 0.0;
            for (double v : cell.bpds) sum += v;
            cell.mean_bpd = sum / static_cast<double>(cell.bpds.size());
            histogram(cell, bins);
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

PsdCurve average_psd(const std::vector<Tensor>& images) {
    if (images.empty()) throw ValueError("average_psd: empty image set");
    const Shape shape = images.front().shape();
    if (shape.size() != 3) throw ShapeError("average_psd: images must be rank-3 [C,N,N]");
    if (shape[1] != shape[2])
        throw ShapeError("average_psd: images must be square, got " + shape_str(shape));
    for (const auto& img : images)
        if (img.shape() != shape)
            throw ShapeError("average_psd: image sizes differ: " + shape_str(img.shape()) + " vs " +
                             shape_str(shape));

    const std::int64_t C = shape[0];
    const std::int64_t N = shape[1];
    const auto n = static_cast<std::size_t>(N);

    // Radix-2 FFT when possible, twiddle-table DFT otherwise.
    std::int64_t pow2 = N;
    while (pow2 > 1 && pow2 % 2 == 0) pow2 /= 2;
    const bool use_fft = (pow2 == 1) && N > 1;

    std::vector<std::complex<double>> twiddle(n);
    for (std::size_t k = 0; k < n; ++k)
        twiddle[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(N));

    auto transform_line = [&](std::complex<double>* line, std::ptrdiff_t stride) {
        if (use_fft) {
            // iterative Cooley-Tukey, bit-reversed reordering
            std::size_t j = 0;
            for (std::size_t i = 1; i < n; ++i) {
                std::size_t bit = n >> 1;
                for (; j & bit; bit >>= 1) j ^= bit;
                j ^= bit;
                if (i < j) std::swap(line[static_cast<std::ptrdiff_t>(i) * stride],
                                     line[static_cast<std::ptrdiff_t>(j) * stride]);
            }
            for (std::size_t len = 2; len <= n; len <<= 1) {
                const std::size_t step = n / len;
                for (std::size_t i = 0; i < n; i += len)
                    for (std::size_t k = 0; k < len / 2; ++k) {
                        auto& a = line[static_cast<std::ptrdiff_t>(i + k) * stride];
                        auto& b = line[static_cast<std::ptrdiff_t>(i + k + len / 2) * stride];
                        const std::complex<double> t = b * twiddle[k * step];
                        b = a - t;
                        a += t;
                    }
            }
        } else {
            std::vector<std::complex<double>> out(n);
            for (std::size_t u = 0; u < n; ++u) {
                std::complex<double> acc = 0.0;
                for (std::size_t x = 0; x < n; ++x)
                    acc += line[static_cast<std::ptrdiff_t>(x) * stride] * twiddle[(u * x) % n];
                out[u] = acc;
            }
            for (std::size_t u = 0; u < n; ++u) line[static_cast<std::ptrdiff_t>(u) * stride] = out[u];
        }
    };

    // folded-frequency integer radius per cell
    const std::int64_t half = N / 2;
    auto radius_of = [&](std::int64_t u, std::int64_t v) {
        const std::int64_t fu = u <= half ? u : u - N;
        const std::int64_t fv = v <= half ? v : v - N;
        return static_cast<std::size_t>(
            std::lround(std::sqrt(static_cast<double>(fu * fu + fv * fv))));
    };
    const std::size_t max_r = radius_of(half, half);

    std::vector<double> power_sum(max_r + 1, 0.0);
    std::vector<std::int64_t> cell_count(max_r + 1, 0);
    for (std::int64_t u = 0; u < N; ++u)
        for (std::int64_t v = 0; v < N; ++v) ++cell_count[radius_of(u, v)];

    double total_power = 0.0, mean_energy = 0.0;
    std::vector<std::complex<double>> grid(n * n);
    for (const auto& img : images) {
        auto px = img.data();
        const std::size_t plane = n * n;
        for (std::size_t i = 0; i < plane; ++i) {
            double lum = 0.0;
            for (std::int64_t c = 0; c < C; ++c) lum += px[static_cast<std::size_t>(c) * plane + i];
            lum /= static_cast<double>(C);
            grid[i] = lum;
            mean_energy += lum * lum;
        }
        for (std::size_t y = 0; y < n; ++y) transform_line(grid.data() + y * n, 1);
        for (std::size_t x = 0; x < n; ++x) transform_line(grid.data() + x, static_cast<std::ptrdiff_t>(n));
        for (std::int64_t u = 0; u < N; ++u)
            for (std::int64_t v = 0; v < N; ++v) {
                const double p = std::norm(grid[static_cast<std::size_t>(u) * n + static_cast<std::size_t>(v)]) /
                                 static_cast<double>(N * N);
                power_sum[radius_of(u, v)] += p;
                total_power += p;
            }
    }

    PsdCurve curve;
    curve.mean_power.resize(max_r + 1);
    const auto n_img = static_cast<double>(images.size());
    for (std::size_t r = 0; r <= max_r; ++r)
        curve.mean_power[r] =
            cell_count[r] ? power_sum[r] / (n_img * static_cast<double>(cell_count[r])) : 0.0;
    curve.total_power = total_power / n_img;
    curve.mean_energy = mean_energy / n_img;
    for (std::int64_t b = half; b >= 1; b /= 2) curve.level_boundaries.push_back(b);
    return curve;
}

void write_scores_csv(const std::string& path, const std::vector<ScoreRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "id,split,nll_nats,bpd\n";
    for (const auto& r : records)
        out << r.id << "," << r.split << "," << format_g17(r.nll_nats) << "," << format_g17(r.bpd) << "\n";
    if (!out) throw IoError("failed writing " + path);
}

std::vector<ScoreRecord> read_scores_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ":1: empty scores file");
    if (line == "id,split,nll_nats,bpd\r") line.pop_back();
    if (line != "id,split,nll_nats,bpd")
        throw IoError(path + ":1: expected header 'id,split,nll_nats,bpd'");
    std::vector<ScoreRecord> records;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        ScoreRecord r;
        std::string nll, bpd, extra;
        if (!std::getline(ss, r.id, ',') || !std::getline(ss, r.split, ',') ||
            !std::getline(ss, nll, ',') || !std::getline(ss, bpd, ','))
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 4 comma-separated fields");
        if (std::getline(ss, extra, ','))
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 4 comma-separated fields");
        try {
            std::size_t pos = 0;
            r.nll_nats = std::stod(nll, &pos);
            if (pos != nll.size()) throw std::invalid_argument(nll);
            r.bpd = std::stod(bpd, &pos);
            if (pos != bpd.size()) throw std::invalid_argument(bpd);
        } catch (const std::exception&) {
            throw IoError(path + ":" + std::to_string(lineno) + ": malformed number");
        }
        records.push_back(std::move(r));
    }
    return records;
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc, double auc) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "threshold,fpr,tpr\n";
    for (const auto& p : roc)
        out << format_g17(p.threshold) << "," << format_g17(p.fpr) << "," << format_g17(p.tpr) << "\n";
    out << "# auc=" << format_g17(auc) << "\n";
    if (!out) throw IoError("failed writing " + path);
}

void write_levels_csv(const std::string& path, const std::vector<LevelSweepCell>& cells) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "level,sigma,bin_left,bin_right,count\n";
    for (const auto& cell : cells)
        for (std::size_t b = 0; b < cell.counts.size(); ++b)
            out << cell.level << "," << format_g17(cell.sigma) << "," << format_g17(cell.bin_edges[b]) << ","
                << format_g17(cell.bin_edges[b + 1]) << "," << cell.counts[b] << "\n";
    if (!out) throw IoError("failed writing " + path);
}

void write_psd_csv(const std::string& path, const PsdCurve& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "radius,mean_power\n";
    for (std::size_t r = 0; r < curve.mean_power.size(); ++r)
        out << r << "," << format_g17(curve.mean_power[r]) << "\n";
    for (std::int64_t b : curve.level_boundaries) out << "# level_boundary=" << b << "\n";
    if (!out) throw IoError("failed writing " + path);
}

} // namespace flowood
