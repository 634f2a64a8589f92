#include "flowood/train.hpp"

#include "flowood/checkpoint.hpp"
#include "flowood/errors.hpp"
#include "flowood/format.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <utility>

namespace flowood {

namespace {

using nlohmann::json;

// Fixed stream tags. Model construction and the holdout split must not
// depend on how far training has progressed, so they derive straight from
// the config seed rather than the advancing master generator.
constexpr std::uint64_t kInitTag = 0xF1;
constexpr std::uint64_t kSplitTag = 0xF2;
constexpr std::uint64_t kEpochStreamTag = 0xF3;
constexpr std::uint64_t kEvalNoiseTag = 0xF4;

std::int64_t log2_exact(std::int64_t n) {
    std::int64_t k = 0;
    while (n > 1 && n % 2 == 0) {
        n /= 2;
        ++k;
    }
    return n == 1 ? k : -1;
}

std::int64_t parse_int(const std::string& key, const std::string& value, const std::string& origin) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ValueError(origin + ": invalid integer for '" + key + "': '" + value + "'");
    }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value, const std::string& origin) {
    try {
        std::size_t pos = 0;
        if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ValueError(origin + ": invalid unsigned integer for '" + key + "': '" + value + "'");
    }
}

double parse_float(const std::string& key, const std::string& value, const std::string& origin) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ValueError(origin + ": invalid number for '" + key + "': '" + value + "'");
    }
}

void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
}

} // namespace

std::string to_string(ModelKind kind) {
    return kind == ModelKind::glow ? "glow" : "waveletflow";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "glow") return ModelKind::glow;
    if (s == "waveletflow") return ModelKind::waveletflow;
    throw ValueError("unknown model kind '" + s + "' (expected glow or waveletflow)");
}

std::string to_string(MaskScheme scheme) {
    switch (scheme) {
        case MaskScheme::channel_wise: return "channel_wise";
        case MaskScheme::checkerboard: return "checkerboard";
        case MaskScheme::cycle: return "cycle";
    }
    throw ValueError("unknown mask scheme value");
}

MaskScheme mask_scheme_from_string(const std::string& s) {
    if (s == "channel_wise") return MaskScheme::channel_wise;
    if (s == "checkerboard") return MaskScheme::checkerboard;
    if (s == "cycle") return MaskScheme::cycle;
    throw ValueError("unknown mask scheme '" + s + "' (expected channel_wise, checkerboard, or cycle)");
}

void apply_preset(TrainConfig& cfg, const std::string& name) {
    cfg.model_kind = ModelKind::glow;
    if (name == "channel-wise") {
        cfg.epochs = 1000;
        cfg.batch_size = 16;
        cfg.learning_rate = 5e-4;
        cfg.weight_decay = 1e-3;
        cfg.hidden_channels = 256;
        cfg.mask_scheme = MaskScheme::channel_wise;
    } else if (name == "checker") {
        cfg.epochs = 350;
        cfg.batch_size = 8;
        cfg.learning_rate = 1e-4;
        cfg.weight_decay = 1e-3;
        cfg.hidden_channels = 512;
        cfg.mask_scheme = MaskScheme::checkerboard;
    } else if (name == "cycle-1") {
        cfg.epochs = 500;
        cfg.batch_size = 8;
        cfg.learning_rate = 1e-4;
        cfg.weight_decay = 1e-3;
        cfg.hidden_channels = 128;
        cfg.mask_scheme = MaskScheme::cycle;
        cfg.cycle_iterations = 1;
    } else {
        throw ValueError("unknown preset '" + name + "' (expected channel-wise, checker, or cycle-1)");
    }
}

void apply_config_entries(TrainConfig& cfg, const std::vector<std::pair<std::string, std::string>>& entries,
                          const std::string& origin) {
    for (const auto& [key, value] : entries) {
        if (key == "model_kind") {
            try {
                cfg.model_kind = model_kind_from_string(value);
            } catch (const ValueError& e) {
                throw ValueError(origin + ": " + e.what());
            }
        } else if (key == "epochs") {
            cfg.epochs = parse_int(key, value, origin);
        } else if (key == "batch_size") {
            cfg.batch_size = parse_int(key, value, origin);
        } else if (key == "learning_rate") {
            cfg.learning_rate = parse_float(key, value, origin);
        } else if (key == "weight_decay") {
            cfg.weight_decay = parse_float(key, value, origin);
        } else if (key == "clip_norm") {
            cfg.clip_norm = parse_float(key, value, origin);
        } else if (key == "warmup_steps") {
            cfg.warmup_steps = parse_int(key, value, origin);
        } else if (key == "seed") {
            cfg.seed = parse_uint(key, value, origin);
        } else if (key == "holdout_fraction") {
            cfg.holdout_fraction = parse_float(key, value, origin);
        } else if (key == "checkpoint_interval") {
            cfg.checkpoint_interval = parse_int(key, value, origin);
        } else if (key == "image_extent") {
            cfg.image_extent = parse_int(key, value, origin);
        } else if (key == "image_channels") {
            cfg.image_channels = parse_int(key, value, origin);
        } else if (key == "quantization_levels") {
            cfg.quantization_levels = static_cast<int>(parse_int(key, value, origin));
        } else if (key == "hidden_channels") {
            cfg.hidden_channels = parse_int(key, value, origin);
        } else if (key == "mask_scheme") {
            try {
                cfg.mask_scheme = mask_scheme_from_string(value);
            } catch (const ValueError& e) {
                throw ValueError(origin + ": " + e.what());
            }
        } else if (key == "cycle_iterations") {
            cfg.cycle_iterations = static_cast<int>(parse_int(key, value, origin));
        } else if (key == "levels") {
            cfg.levels = parse_int(key, value, origin);
        } else if (key == "flows_per_level") {
            cfg.flows_per_level = parse_int(key, value, origin);
        } else if (key == "base_flow_steps") {
            cfg.base_flow_steps = parse_int(key, value, origin);
        } else if (key == "wavelet_flows_per_level") {
            cfg.wavelet_flows_per_level = parse_int(key, value, origin);
        } else if (key == "train_level") {
            cfg.train_level = parse_int(key, value, origin);
        } else {
            throw ValueError(origin + ": unknown key '" + key + "'");
        }
    }
}

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw ValueError("train config: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ValueError("train config: batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0)) throw ValueError("train config: learning_rate must be > 0");
    if (cfg.weight_decay < 0.0) throw ValueError("train config: weight_decay must be >= 0");
    if (cfg.clip_norm < 0.0) throw ValueError("train config: clip_norm must be >= 0");
    if (cfg.warmup_steps < 0) throw ValueError("train config: warmup_steps must be >= 0");
    if (!(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0))
        throw ValueError("train config: holdout_fraction must be in [0, 1)");
    if (cfg.checkpoint_interval < 0) throw ValueError("train config: checkpoint_interval must be >= 0");
    if (cfg.image_extent < 1) throw ValueError("train config: image_extent must be >= 1");
    if (cfg.image_channels != 1 && cfg.image_channels != 3)
        throw ValueError("train config: image_channels must be 1 or 3");
    if (cfg.quantization_levels < 2) throw ValueError("train config: quantization_levels must be >= 2");
    if (cfg.hidden_channels < 1) throw ValueError("train config: hidden_channels must be >= 1");
    if (cfg.levels < 1) throw ValueError("train config: levels must be >= 1");
    if (cfg.flows_per_level < 1) throw ValueError("train config: flows_per_level must be >= 1");
    if (cfg.base_flow_steps < 1) throw ValueError("train config: base_flow_steps must be >= 1");
    if (cfg.wavelet_flows_per_level < 1)
        throw ValueError("train config: wavelet_flows_per_level must be >= 1");

    if (cfg.model_kind == ModelKind::waveletflow) {
        const std::int64_t n = log2_exact(cfg.image_extent);
        if (n < 1)
            throw ValueError("train config: waveletflow needs a power-of-two image_extent >= 2, got " +
                             std::to_string(cfg.image_extent));
        if (cfg.train_level < -1 || cfg.train_level > n)
            throw ValueError("train config: train_level must be in [-1, " + std::to_string(n) + "]");
    } else if (cfg.train_level != -1) {
        throw ValueError("train config: train_level applies to waveletflow only");
    }
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["model_kind"] = to_string(cfg.model_kind);
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["learning_rate"] = cfg.learning_rate;
    j["weight_decay"] = cfg.weight_decay;
    j["clip_norm"] = cfg.clip_norm;
    j["warmup_steps"] = cfg.warmup_steps;
    j["seed"] = std::to_string(cfg.seed); // u64 does not fit a JSON number exactly
    j["holdout_fraction"] = cfg.holdout_fraction;
    j["checkpoint_interval"] = cfg.checkpoint_interval;
    j["image_extent"] = cfg.image_extent;
    j["image_channels"] = cfg.image_channels;
    j["quantization_levels"] = cfg.quantization_levels;
    j["hidden_channels"] = cfg.hidden_channels;
    j["mask_scheme"] = to_string(cfg.mask_scheme);
    j["cycle_iterations"] = cfg.cycle_iterations;
    j["levels"] = cfg.levels;
    j["flows_per_level"] = cfg.flows_per_level;
    j["base_flow_steps"] = cfg.base_flow_steps;
    j["wavelet_flows_per_level"] = cfg.wavelet_flows_per_level;
    j["train_level"] = cfg.train_level;
    return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
    TrainConfig cfg;
    try {
        const json j = json::parse(text);
        cfg.model_kind = model_kind_from_string(j.at("model_kind").get<std::string>());
        cfg.epochs = j.at("epochs").get<std::int64_t>();
        cfg.batch_size = j.at("batch_size").get<std::int64_t>();
        cfg.learning_rate = j.at("learning_rate").get<double>();
        cfg.weight_decay = j.at("weight_decay").get<double>();
        cfg.clip_norm = j.at("clip_norm").get<double>();
        cfg.warmup_steps = j.value("warmup_steps", std::int64_t{0});
        cfg.seed = std::stoull(j.at("seed").get<std::string>());
        cfg.holdout_fraction = j.at("holdout_fraction").get<double>();
        cfg.checkpoint_interval = j.at("checkpoint_interval").get<std::int64_t>();
        cfg.image_extent = j.at("image_extent").get<std::int64_t>();
        cfg.image_channels = j.at("image_channels").get<std::int64_t>();
        cfg.quantization_levels = j.at("quantization_levels").get<int>();
        cfg.hidden_channels = j.at("hidden_channels").get<std::int64_t>();
        cfg.mask_scheme = mask_scheme_from_string(j.at("mask_scheme").get<std::string>());
        cfg.cycle_iterations = j.at("cycle_iterations").get<int>();
        cfg.levels = j.at("levels").get<std::int64_t>();
        cfg.flows_per_level = j.at("flows_per_level").get<std::int64_t>();
        cfg.base_flow_steps = j.at("base_flow_steps").get<std::int64_t>();
        cfg.wavelet_flows_per_level = j.at("wavelet_flows_per_level").get<std::int64_t>();
        cfg.train_level = j.at("train_level").get<std::int64_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed train config blob: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw IoError("malformed train config blob: bad seed value");
    }
    return cfg;
}

TrainSession::TrainSession(TrainConfig cfg, Dataset data) {
    validate_train_config(cfg);
    cfg_ = std::move(cfg);
    data_ = std::move(data);
    const Shape expected = {cfg_.image_channels, cfg_.image_extent, cfg_.image_extent};
    if (data_.item_shape != expected)
        throw ShapeError("dataset items " + shape_str(data_.item_shape) +
                         " do not match the configured shape " + shape_str(expected));
    build_model();
    setup_split();
    build_optimizers();
    master_rng_ = Rng(mix_seed(cfg_.seed, kEpochStreamTag));
}

namespace {

// The init stream is derived from the seed, so a model rebuilt for resume or
// scoring reproduces the construction-time permutations exactly.
std::unique_ptr<GlowModel> make_glow(const TrainConfig& cfg, Rng& init) {
    GlowConfig g;
    g.levels = cfg.levels;
    g.flows_per_level = cfg.flows_per_level;
    g.hidden_channels = cfg.hidden_channels;
    g.mask_scheme = cfg.mask_scheme;
    g.cycle_iterations = cfg.cycle_iterations;
    g.image_shape = {cfg.image_channels, cfg.image_extent, cfg.image_extent};
    g.quantization_levels = cfg.quantization_levels;
    return std::make_unique<GlowModel>(g, init);
}

std::unique_ptr<WaveletFlowModel> make_waveletflow(const TrainConfig& cfg, Rng& init) {
    WaveletFlowConfig w;
    w.n_levels = log2_exact(cfg.image_extent);
    w.channels = cfg.image_channels;
    w.flows_per_level = cfg.wavelet_flows_per_level;
    w.hidden_channels = cfg.hidden_channels;
    w.base_flow_steps = cfg.base_flow_steps;
    w.quantization_levels = cfg.quantization_levels;
    return std::make_unique<WaveletFlowModel>(w, init);
}

void apply_actnorm_flags(GlowModel* glow, WaveletFlowModel* wf, const std::vector<bool>& flags) {
    if (glow) {
        if (flags.size() != 1) throw IoError("checkpoint actnorm flags do not match the model layout");
        glow->set_actnorm_initialized(flags[0]);
    } else {
        if (flags.size() != static_cast<std::size_t>(wf->n_levels() + 1))
            throw IoError("checkpoint actnorm flags do not match the model layout");
        for (std::int64_t l = 0; l <= wf->n_levels(); ++l)
            wf->set_level_actnorm_initialized(l, flags[static_cast<std::size_t>(l)]);
    }
}

} // namespace

void TrainSession::build_model() {
    Rng init(mix_seed(cfg_.seed, kInitTag));
    if (cfg_.model_kind == ModelKind::glow)
        glow_ = make_glow(cfg_, init);
    else
        wf_ = make_waveletflow(cfg_, init);
}

void TrainSession::set_epochs(std::int64_t epochs) {
    if (epochs < 1) throw ValueError("epochs must be >= 1");
    cfg_.epochs = epochs;
}

void TrainSession::set_checkpoint_interval(std::int64_t epochs) {
    if (epochs < 0) throw ValueError("checkpoint_interval must be >= 0");
    cfg_.checkpoint_interval = epochs;
}

void TrainSession::setup_split() {
    const auto n = static_cast<std::int64_t>(data_.size());
    if (n < 1) throw ValueError("training dataset is empty");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(mix_seed(cfg_.seed, kSplitTag));
    shuffle_indices(idx, rng);

    auto n_val = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * cfg_.holdout_fraction));
    if (n_val >= n) n_val = n - 1; // never starve the train split
    val_idx_.assign(idx.begin(), idx.begin() + n_val);
    train_idx_.assign(idx.begin() + n_val, idx.end());
    std::sort(val_idx_.begin(), val_idx_.end());
    std::sort(train_idx_.begin(), train_idx_.end());
}

void TrainSession::build_optimizers() {
    AdamConfig ac;
    ac.learning_rate = cfg_.learning_rate;
    ac.weight_decay = cfg_.weight_decay;
    ac.clip_norm = cfg_.clip_norm;
    ac.warmup_steps = cfg_.warmup_steps;
    optimizers_.clear();
    if (glow_) {
        std::vector<Param> params;
        glow_->append_params(params);
        optimizers_.emplace_back(std::move(params), ac);
    } else {
        // One optimizer per level (base last), so gradient clipping and
        // moment state stay per-level and levels remain independently
        // trainable.
        for (std::int64_t l = 0; l <= wf_->n_levels(); ++l) {
            std::vector<Param> params;
            wf_->append_level_params(l, params);
            optimizers_.emplace_back(std::move(params), ac);
        }
    }
}

Tensor TrainSession::dequantized_batch(const std::vector<std::int64_t>& indices, Rng& noise) {
    std::vector<std::size_t> pick;
    pick.reserve(indices.size());
    for (std::int64_t i : indices) pick.push_back(static_cast<std::size_t>(i));
    Tensor batch = dataset_batch(data_, pick);
    const double q = static_cast<double>(cfg_.quantization_levels);
    for (auto& v : batch.data()) v = (v + noise.uniform()) / q;
    return batch;
}

Tensor TrainSession::loss_on(const Tensor& batch) {
    if (glow_) return glow_->nll_loss(batch);
    if (cfg_.train_level >= 0) return wf_->level_nll_loss(batch, cfg_.train_level);
    return wf_->nll_loss(batch);
}

double TrainSession::bpd_denominator() const {
    const double ln2 = std::numbers::ln2;
    if (wf_ && cfg_.train_level >= 0)
        return static_cast<double>(wf_->level_coeff_count(cfg_.train_level)) * ln2;
    const std::int64_t dim = glow_ ? glow_->data_dim() : wf_->data_dim();
    return static_cast<double>(dim) * ln2;
}

TrainSession::EpochStats TrainSession::train_epoch() {
    const std::int64_t epoch = epochs_done_ + 1;
    const std::uint64_t epoch_seed = master_rng_.next_u64();

    std::vector<std::int64_t> order = train_idx_;
    Rng shuffle_rng(mix_seed(epoch_seed, 0));
    shuffle_indices(order, shuffle_rng);
    Rng noise(mix_seed(epoch_seed, 1));

    double nll_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
        const std::vector<std::int64_t> chunk(order.begin() + start, order.begin() + stop);
        Tensor batch = dequantized_batch(chunk, noise);
        Tensor loss = loss_on(batch);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            std::string layer = glow_ ? glow_->first_nonfinite_layer(batch) : wf_->first_nonfinite_layer(batch);
            if (layer.empty()) layer = "loss reduction";
            throw NumericError("training aborted at epoch " + std::to_string(epoch) +
                               ": non-finite loss; first non-finite layer: " + layer);
        }
        for (auto& opt : optimizers_) opt.zero_grad();
        backward(loss);
        if (wf_ && cfg_.train_level >= 0)
            optimizers_[static_cast<std::size_t>(cfg_.train_level)].step();
        else
            for (auto& opt : optimizers_) opt.step();
        nll_sum += value * static_cast<double>(chunk.size());
        seen += static_cast<std::int64_t>(chunk.size());
    }
    ++epochs_done_;

    EpochStats st;
    st.epoch = epoch;
    st.train_nll = nll_sum / static_cast<double>(seen);
    st.train_bpd = st.train_nll / bpd_denominator();
    if (!val_idx_.empty()) {
        auto [nll, bpd] = evaluate(val_idx_);
        st.val_nll = nll;
        st.val_bpd = bpd;
        st.has_val = true;
    }
    return st;
}

std::pair<double, double> TrainSession::evaluate(const std::vector<std::int64_t>& indices) {
    if (indices.empty()) throw ValueError("evaluate: empty index list");
    NoGradGuard ng;
    const double q = static_cast<double>(cfg_.quantization_levels);
    const std::int64_t per_item = shape_numel(data_.item_shape);
    double nll_sum = 0.0;
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
        const std::size_t stop = std::min(indices.size(), start + static_cast<std::size_t>(cfg_.batch_size));
        std::vector<std::size_t> pick(indices.begin() + start, indices.begin() + stop);
        Tensor batch = dataset_batch(data_, pick);
        auto d = batch.data();
        // Fixed per-item noise so validation curves reflect parameter
        // movement, not dequantization jitter.
        for (std::size_t i = 0; i < pick.size(); ++i) {
            Rng noise(mix_seed(cfg_.seed, kEvalNoiseTag, static_cast<std::uint64_t>(pick[i])));
            for (std::int64_t k = 0; k < per_item; ++k) {
                auto& v = d[i * static_cast<std::size_t>(per_item) + static_cast<std::size_t>(k)];
                v = (v + noise.uniform()) / q;
            }
        }
        Tensor loss = loss_on(batch);
        nll_sum += loss.item() * static_cast<double>(pick.size());
    }
    const double nll = nll_sum / static_cast<double>(indices.size());
    return {nll, nll / bpd_denominator()};
}

void TrainSession::run(const std::string& history_path, const std::string& checkpoint_path,
                       const std::function<void(const EpochStats&)>& on_epoch) {
    std::ofstream hist;
    if (!history_path.empty()) {
        namespace fs = std::filesystem;
        std::error_code ec;
        const bool fresh = !fs::exists(history_path, ec) || fs::file_size(history_path, ec) == 0;
        hist.open(history_path, std::ios::app);
        if (!hist) throw IoError("cannot open history file " + history_path);
        if (fresh) hist << "epoch,split,mean_bpd,mean_nll\n";
    }

    while (epochs_done_ < cfg_.epochs) {
        EpochStats st = train_epoch();
        if (hist.is_open()) {
            hist << st.epoch << ",train," << format_g17(st.train_bpd) << "," << format_g17(st.train_nll)
                 << "\n";
            if (st.has_val)
                hist << st.epoch << ",val," << format_g17(st.val_bpd) << "," << format_g17(st.val_nll)
                     << "\n";
            hist.flush();
        }
        if (!checkpoint_path.empty() && cfg_.checkpoint_interval > 0 &&
            epochs_done_ % cfg_.checkpoint_interval == 0 && epochs_done_ < cfg_.epochs)
            save(checkpoint_path);
        if (on_epoch) on_epoch(st);
    }
    if (!checkpoint_path.empty()) save(checkpoint_path);
}

void TrainSession::save(const std::string& path) {
    Checkpoint ck;
    ck.model_kind = glow_ ? kModelKindGlow : kModelKindWaveletFlow;

    json j;
    j["train_config"] = json::parse(train_config_to_json(cfg_));
    j["item_shape"] = data_.item_shape;
    j["epochs_done"] = epochs_done_;
    std::vector<std::string> words;
    for (std::uint64_t w : master_rng_.state()) words.push_back(std::to_string(w));
    j["rng_state"] = words;
    std::vector<std::int64_t> steps;
    for (const auto& opt : optimizers_) steps.push_back(opt.step_count());
    j["optimizer_steps"] = steps;
    std::vector<bool> actnorm;
    if (glow_) {
        actnorm.push_back(glow_->actnorm_initialized());
    } else {
        for (std::int64_t l = 0; l <= wf_->n_levels(); ++l)
            actnorm.push_back(wf_->level_actnorm_initialized(l));
    }
    j["actnorm"] = actnorm;
    ck.config_json = j.dump();

    if (glow_)
        glow_->append_params(ck.tensors);
    else
        wf_->append_params(ck.tensors);
    for (auto& opt : optimizers_) opt.append_state(ck.tensors);
    save_checkpoint(path, ck);
}

TrainSession TrainSession::resume(const std::string& checkpoint_path, Dataset data) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);

    TrainSession s;
    std::vector<std::uint64_t> rng_words;
    std::vector<std::int64_t> opt_steps;
    std::vector<bool> actnorm;
    Shape item_shape;
    try {
        const json j = json::parse(ck.config_json);
        s.cfg_ = train_config_from_json(j.at("train_config").dump());
        item_shape = j.at("item_shape").get<Shape>();
        s.epochs_done_ = j.at("epochs_done").get<std::int64_t>();
        for (const auto& w : j.at("rng_state").get<std::vector<std::string>>())
            rng_words.push_back(std::stoull(w));
        opt_steps = j.at("optimizer_steps").get<std::vector<std::int64_t>>();
        actnorm = j.at("actnorm").get<std::vector<bool>>();
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint config blob: " + std::string(e.what()));
    } catch (const std::invalid_argument&) {
        throw IoError("malformed checkpoint config blob: bad rng state");
    }
    validate_train_config(s.cfg_);
    const std::uint8_t expected_kind =
        s.cfg_.model_kind == ModelKind::glow ? kModelKindGlow : kModelKindWaveletFlow;
    if (ck.model_kind != expected_kind)
        throw IoError("checkpoint model kind byte disagrees with its config blob");

    s.data_ = std::move(data);
    if (s.data_.item_shape != item_shape)
        throw ShapeError("dataset items " + shape_str(s.data_.item_shape) +
                         " do not match checkpointed shape " + shape_str(item_shape));

    s.build_model();
    std::vector<Param> model_params;
    if (s.glow_)
        s.glow_->append_params(model_params);
    else
        s.wf_->append_params(model_params);
    restore_tensors(ck, model_params);
    apply_actnorm_flags(s.glow_.get(), s.wf_.get(), actnorm);

    s.setup_split();
    s.build_optimizers();
    if (opt_steps.size() != s.optimizers_.size())
        throw IoError("checkpoint optimizer steps do not match the model layout");
    std::vector<Param> opt_state;
    for (auto& opt : s.optimizers_) opt.append_state(opt_state);
    restore_tensors(ck, opt_state);
    for (std::size_t i = 0; i < s.optimizers_.size(); ++i) s.optimizers_[i].set_step_count(opt_steps[i]);

    if (rng_words.size() != 4) throw IoError("checkpoint rng state must have 4 words");
    Rng::State state;
    std::copy(rng_words.begin(), rng_words.end(), state.begin());
    s.master_rng_.set_state(state);
    return s;
}

TrainConfig checkpoint_train_config(const std::string& checkpoint_path) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    TrainConfig cfg;
    try {
        const json j = json::parse(ck.config_json);
        cfg = train_config_from_json(j.at("train_config").dump());
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint config blob: " + std::string(e.what()));
    }
    validate_train_config(cfg);
    return cfg;
}

RestoredModel restore_model(const std::string& checkpoint_path) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    RestoredModel m;
    std::vector<bool> actnorm;
    try {
        const json j = json::parse(ck.config_json);
        m.config = train_config_from_json(j.at("train_config").dump());
        actnorm = j.at("actnorm").get<std::vector<bool>>();
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint config blob: " + std::string(e.what()));
    }
    validate_train_config(m.config);
    const std::uint8_t expected_kind =
        m.config.model_kind == ModelKind::glow ? kModelKindGlow : kModelKindWaveletFlow;
    if (ck.model_kind != expected_kind)
        throw IoError("checkpoint model kind byte disagrees with its config blob");

    Rng init(mix_seed(m.config.seed, kInitTag));
    std::vector<Param> params;
    if (m.config.model_kind == ModelKind::glow) {
        m.glow = make_glow(m.config, init);
        m.glow->append_params(params);
    } else {
        m.waveletflow = make_waveletflow(m.config, init);
        m.waveletflow->append_params(params);
    }
    restore_tensors(ck, params);
    apply_actnorm_flags(m.glow.get(), m.waveletflow.get(), actnorm);
    return m;
}

Tensor chain_nll(FlowChain& chain, const Tensor& points) {
    if (points.rank() != 2 || points.shape()[0] < 1)
        throw ValueError("chain_nll expects a nonempty [N,D] batch");
    const std::int64_t n = points.shape()[0];
    const std::int64_t d = points.shape()[1];
    FlowResult r = chain.forward(points);
    Tensor lp = StandardNormal(d).log_prob_batch(reshape(r.y, {n, d})) + r.logdet;
    return 0.0 - mean(lp);
}

std::vector<double> fit_density_chain(FlowChain& chain, const Tensor& points, const AdamConfig& opt_cfg,
                                      std::int64_t steps) {
    if (steps < 1) throw ValueError("fit_density_chain: steps must be >= 1");
    std::vector<Param> params;
    chain.append_params("", params);
    Adam opt(std::move(params), opt_cfg);

    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(steps));
    for (std::int64_t s = 0; s < steps; ++s) {
        opt.zero_grad();
        Tensor loss = chain_nll(chain, points);
        const double value = loss.item();
        if (!std::isfinite(value))
            throw NumericError("fit_density_chain: non-finite loss at step " + std::to_string(s + 1));
        backward(loss);
        opt.step();
        history.push_back(value);
    }
    return history;
}

} // namespace flowood
