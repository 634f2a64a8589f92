#pragma once

#include "flowood/config_file.hpp"
#include "flowood/dataset.hpp"
#include "flowood/glow.hpp"
#include "flowood/optim.hpp"
#include "flowood/waveletflow.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace flowood {

enum class ModelKind { glow, waveletflow };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);
std::string to_string(MaskScheme scheme);
MaskScheme mask_scheme_from_string(const std::string& s);

struct TrainConfig {
    ModelKind model_kind = ModelKind::glow;

    std::int64_t epochs = 100;
    std::int64_t batch_size = 16;
    double learning_rate = 5e-4;
    double weight_decay = 1e-3;
    double clip_norm = 50.0; // global gradient-norm clip; 0 disables
    // Linear lr warmup in optimizer steps; 0 disables. Deep coupling stacks
    // (the published presets) need this against the coherent first Adam step.
    std::int64_t warmup_steps = 0;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.2;      // validation share of the dataset
    std::int64_t checkpoint_interval = 0; // epochs between writes; 0 = final only

    // image preprocessing (dataset loading happens upstream; these are echoed
    // into checkpoints so scoring tools can rebuild the same pipeline)
    std::int64_t image_extent = 32;
    std::int64_t image_channels = 3;
    int quantization_levels = 256;

    std::int64_t hidden_channels = 256;

    // glow
    MaskScheme mask_scheme = MaskScheme::channel_wise;
    int cycle_iterations = 1;
    std::int64_t levels = 3;
    std::int64_t flows_per_level = 32;

    // waveletflow; the pyramid depth is log2(image_extent)
    std::int64_t base_flow_steps = 4;
    std::int64_t wavelet_flows_per_level = 4;
    // -1 trains every level; >= 0 restricts updates (and history rows) to one
    // level, whose NLL is then the conditional term without the pixel-level
    // dequantization correction.
    std::int64_t train_level = -1;
};

// Named hyperparameter presets for the three masking models. Sets epochs,
// batch size, learning rate, weight decay, hidden channels, and the mask
// scheme; everything else keeps its current value.
void apply_preset(TrainConfig& cfg, const std::string& name);

// Applies parsed "key = value" entries. Unknown keys and unparseable values
// are errors naming the origin.
void apply_config_entries(TrainConfig& cfg, const std::vector<std::pair<std::string, std::string>>& entries,
                          const std::string& origin);

void validate_train_config(const TrainConfig& cfg);

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

// Owns one model, its optimizer state, and the RNG streams of a training
// run. Construction builds a fresh model; resume() restores everything from
// a checkpoint so the continued run is bit-identical to an uninterrupted
// one. Dataset items must match the configured extent/channels.
class TrainSession {
public:
    TrainSession(TrainConfig cfg, Dataset data);
    static TrainSession resume(const std::string& checkpoint_path, Dataset data);

    const TrainConfig& config() const { return cfg_; }
    const Dataset& data() const { return data_; }
    std::int64_t epochs_done() const { return epochs_done_; }

    // Raises (or lowers) the target epoch count. Extending a resumed run is
    // bit-identical to having trained that many epochs in one go.
    void set_epochs(std::int64_t epochs);
    void set_checkpoint_interval(std::int64_t epochs); // 0 = final write only

    GlowModel* glow() { return glow_.get(); }
    WaveletFlowModel* waveletflow() { return wf_.get(); }

    // Deterministic 80/20 shuffle-split of the dataset (seeded, independent
    // of epoch order). Validation may be empty for tiny datasets.
    const std::vector<std::int64_t>& train_indices() const { return train_idx_; }
    const std::vector<std::int64_t>& val_indices() const { return val_idx_; }

    struct EpochStats {
        std::int64_t epoch = 0; // 1-based
        double train_nll = 0.0, train_bpd = 0.0;
        double val_nll = 0.0, val_bpd = 0.0;
        bool has_val = false;
    };

    // One pass over the training split: shuffles, dequantizes, steps the
    // optimizer(s). Train stats are the running mean over the epoch's
    // batches; validation is a separate no-grad pass with fixed per-item
    // noise. Throws NumericError on a non-finite loss, naming the first
    // non-finite layer.
    EpochStats train_epoch();

    // (mean nll, mean bpd) over the given dataset indices, no gradients.
    std::pair<double, double> evaluate(const std::vector<std::int64_t>& indices);

    // Runs the remaining epochs. Appends history rows
    // (epoch,split,mean_bpd,mean_nll) to history_path, writes a checkpoint to
    // checkpoint_path every cfg.checkpoint_interval epochs and once at the
    // end. Empty paths skip the corresponding output.
    void run(const std::string& history_path, const std::string& checkpoint_path,
             const std::function<void(const EpochStats&)>& on_epoch = {});

    void save(const std::string& path);

private:
    TrainSession() = default;
    void build_model();
    void build_optimizers();
    void setup_split();
    Tensor dequantized_batch(const std::vector<std::int64_t>& indices, Rng& noise);
    Tensor loss_on(const Tensor& batch);
    double bpd_denominator() const; // nats-per-image -> bits-per-dim divisor

    TrainConfig cfg_;
    Dataset data_;
    std::unique_ptr<GlowModel> glow_;
    std::unique_ptr<WaveletFlowModel> wf_;
    std::vector<Adam> optimizers_; // glow: one; waveletflow: per level + base
    std::vector<std::int64_t> train_idx_, val_idx_;
    Rng master_rng_{0};
    std::int64_t epochs_done_ = 0;
};

// Model-only view of a checkpoint, for scoring and sampling. Rebuilds the
// architecture from the config echo and restores weights and actnorm flags;
// the file's optimizer state is ignored. Exactly one model pointer is set.
struct RestoredModel {
    TrainConfig config;
    std::unique_ptr<GlowModel> glow;
    std::unique_ptr<WaveletFlowModel> waveletflow;
};

RestoredModel restore_model(const std::string& checkpoint_path);

// Just the config echo, without rebuilding the model. Used to size the
// ingestion pipeline before deciding how to restore.
TrainConfig checkpoint_train_config(const std::string& checkpoint_path);

// Mean NLL of [N,D] points under the chain with a standard-normal base. No
// dequantization term; this is the continuous-density objective used by the
// low-dimensional fitting path.
Tensor chain_nll(FlowChain& chain, const Tensor& points);

// Full-batch Adam fit of a chain density on fixed points. Returns the mean
// NLL after each step. Aborts with NumericError on a non-finite loss.
std::vector<double> fit_density_chain(FlowChain& chain, const Tensor& points, const AdamConfig& opt_cfg,
                                      std::int64_t steps);

} // namespace flowood
