#include "CLI11.hpp"

#include "flowood/dataset.hpp"
#include "flowood/errors.hpp"
#include "flowood/image_io.hpp"
#include "flowood/ood.hpp"
#include "flowood/train.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace flowood;

namespace {

std::uint64_t parse_seed(const std::string& text, const std::string& what) {
    if (text.empty() || text.front() == '-') throw ValueError(what + " must be a non-negative integer");
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(text, &pos);
        if (pos != text.size()) throw ValueError(what + ": not a number: '" + text + "'");
        return v;
    } catch (const std::exception&) {
        throw ValueError(what + ": not a number: '" + text + "'");
    }
}

// Flag > config file > FLOWOOD_SEED > built-in default.
std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("FLOWOOD_SEED");
    if (!v) return std::nullopt;
    return parse_seed(v, "FLOWOOD_SEED");
}

void report_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (!warnings.empty()) std::cerr << warnings.size() << " item(s) skipped or degraded\n";
}

struct TrainArgs {
    std::string model, data_dir, config_path, preset, out, history, resume;
    std::int64_t level = -1;
    std::int64_t epochs = 0, batch_size = 0, extent = 0, channels = 0, interval = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    bool epochs_set = false, batch_set = false, extent_set = false, channels_set = false;
    bool interval_set = false, lr_set = false, seed_set = false, level_set = false;
};

int cmd_train(const TrainArgs& a) {
    std::string history = a.history;

    if (!a.resume.empty()) {
        if (!a.config_path.empty() || !a.preset.empty())
            throw ValueError("--resume restores the checkpointed config; drop --config/--preset");
        if (a.batch_set || a.lr_set || a.extent_set || a.channels_set || a.seed_set || a.level_set)
            throw ValueError("only --epochs and --checkpoint-interval can accompany --resume");
        const TrainConfig peek = checkpoint_train_config(a.resume);
        std::vector<std::string> warnings;
        Dataset data = load_image_directory(a.data_dir, peek.image_extent, peek.image_channels, &warnings);
        report_warnings(warnings);
        TrainSession session = TrainSession::resume(a.resume, std::move(data));
        if (a.epochs_set) session.set_epochs(a.epochs);
        if (a.interval_set) session.set_checkpoint_interval(a.interval);
        const std::int64_t target = session.config().epochs;
        if (history.empty()) history = fs::path(a.out).replace_extension(".history.csv").string();
        std::cout << "resuming at epoch " << session.epochs_done() + 1 << "/" << target << "\n";
        session.run(history, a.out, [&](const TrainSession::EpochStats& st) {
            std::printf("epoch %lld/%lld train bpd %.4f", static_cast<long long>(st.epoch),
                        static_cast<long long>(target), st.train_bpd);
            if (st.has_val) std::printf(" val bpd %.4f", st.val_bpd);
            std::printf("\n");
        });
        std::cout << "wrote " << a.out << "\n";
        return 0;
    }

    TrainConfig cfg;
    cfg.model_kind = model_kind_from_string(a.model);
    if (!a.preset.empty()) {
        apply_preset(cfg, a.preset);
        if (cfg.model_kind != model_kind_from_string(a.model))
            throw ValueError("preset '" + a.preset + "' configures a glow model; drop --model waveletflow");
    }
    bool config_sets_seed = false;
    if (!a.config_path.empty()) {
        const auto entries = parse_config_file(a.config_path);
        for (const auto& [k, v] : entries)
            if (k == "seed") config_sets_seed = true;
        apply_config_entries(cfg, entries, a.config_path);
    }

    // explicit flags win over the file, the file over the preset
    cfg.model_kind = model_kind_from_string(a.model);
    if (a.epochs_set) cfg.epochs = a.epochs;
    if (a.batch_set) cfg.batch_size = a.batch_size;
    if (a.lr_set) cfg.learning_rate = a.learning_rate;
    if (a.extent_set) cfg.image_extent = a.extent;
    if (a.channels_set) cfg.image_channels = a.channels;
    if (a.interval_set) cfg.checkpoint_interval = a.interval;
    if (a.level_set) cfg.train_level = a.level;
    if (a.seed_set)
        cfg.seed = a.seed;
    else if (!config_sets_seed)
        if (auto s = env_seed()) cfg.seed = *s;

    validate_train_config(cfg);

    std::vector<std::string> warnings;
    Dataset data = load_image_directory(a.data_dir, cfg.image_extent, cfg.image_channels, &warnings);
    report_warnings(warnings);

    TrainSession session(cfg, std::move(data));
    std::cout << "training " << to_string(cfg.model_kind) << " on " << session.data().size() << " images ("
              << session.train_indices().size() << " train / " << session.val_indices().size() << " val)\n";
    if (history.empty()) history = fs::path(a.out).replace_extension(".history.csv").string();
    session.run(history, a.out, [&](const TrainSession::EpochStats& st) {
        std::printf("epoch %lld/%lld train bpd %.4f", static_cast<long long>(st.epoch),
                    static_cast<long long>(cfg.epochs), st.train_bpd);
        if (st.has_val) std::printf(" val bpd %.4f", st.val_bpd);
        std::printf("\n");
    });
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

struct ScoreArgs {
    std::string ckpt, data_dir, split_label = "test", out_dir;
    double sigma = 0.0;
    bool additive = false, per_level = false;
    std::vector<double> sigmas;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
};

int cmd_score(const ScoreArgs& a) {
    RestoredModel m = restore_model(a.ckpt);

    std::vector<std::string> warnings;
    Dataset data =
        load_image_directory(a.data_dir, m.config.image_extent, m.config.image_channels, &warnings);

    ScoreOptions opt;
    opt.split_label = a.split_label;
    opt.sigma = a.sigma;
    opt.additive = a.additive;
    opt.threads = a.threads;
    if (a.seed_set)
        opt.seed = a.seed;
    else if (auto s = env_seed())
        opt.seed = *s;

    const auto records = m.glow ? score_dataset(*m.glow, data, opt, &warnings)
                                : score_dataset(*m.waveletflow, data, opt, &warnings);

    fs::create_directories(a.out_dir);
    const std::string scores_path = (fs::path(a.out_dir) / "scores.csv").string();
    write_scores_csv(scores_path, records);
    std::cout << "wrote " << scores_path << " (" << records.size() << " rows)\n";

    if (a.per_level) {
        if (!m.waveletflow) throw ValueError("--per-level requires a waveletflow checkpoint");
        const std::vector<double> sigmas = a.sigmas.empty() ? std::vector<double>{a.sigma} : a.sigmas;
        const auto cells = per_level_sweep(*m.waveletflow, data, sigmas, opt);
        const std::string levels_path = (fs::path(a.out_dir) / "levels.csv").string();
        write_levels_csv(levels_path, cells);
        std::cout << "wrote " << levels_path << " (" << cells.size() << " cells)\n";
    }

    report_warnings(warnings);
    return 0;
}

int cmd_roc(const std::string& in_path, const std::string& out_path, const std::string& roc_path) {
    auto scores_of = [](const std::string& path) {
        const auto records = read_scores_csv(path);
        if (records.empty()) throw ValueError(path + ": no score rows");
        std::vector<double> s;
        s.reserve(records.size());
        for (const auto& r : records) s.push_back(-r.nll_nats); // higher likelihood = more in-distribution
        return s;
    };
    const auto [roc, auc] = roc_auc(scores_of(in_path), scores_of(out_path));
    write_roc_csv(roc_path, roc, auc);
    std::printf("auc %.4f\n", auc);
    std::cout << "wrote " << roc_path << " (" << roc.size() << " points)\n";
    return 0;
}

int cmd_psd(const std::string& data_dir, std::int64_t extent, std::int64_t channels,
            const std::string& out_path) {
    std::vector<std::string> warnings;
    Dataset data = load_image_directory(data_dir, extent, channels, &warnings);
    report_warnings(warnings);

    std::vector<Tensor> images;
    images.reserve(data.size());
    for (const auto& item : data.items) {
        Tensor img = item.detach();
        for (auto& v : img.data()) v /= 255.0; // spectrum of the [0,1] image
        images.push_back(img);
    }
    const PsdCurve curve = average_psd(images);
    write_psd_csv(out_path, curve);
    std::cout << "wrote " << out_path << " (" << images.size() << " images, " << curve.mean_power.size()
              << " bins)\n";
    return 0;
}

int cmd_sample(const std::string& ckpt, std::int64_t n, double temperature, std::uint64_t seed,
               bool seed_set, const std::string& out_dir) {
    if (!seed_set)
        if (auto es = env_seed()) seed = *es;
    RestoredModel m = restore_model(ckpt);
    NoGradGuard ng;
    const Tensor batch = m.glow ? m.glow->sample(n, temperature, seed)
                                : m.waveletflow->sample(n, temperature, seed);

    fs::create_directories(out_dir);
    const Shape shape = batch.shape(); // [n,C,H,W]
    const auto per = static_cast<std::size_t>(shape[1] * shape[2] * shape[3]);
    auto src = batch.data();
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor img({shape[1], shape[2], shape[3]});
        auto dst = img.data();
        for (std::size_t j = 0; j < per; ++j) dst[j] = src[static_cast<std::size_t>(i) * per + j];
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03lld.png", static_cast<long long>(i));
        write_png((fs::path(out_dir) / name).string(), img);
    }
    std::cout << "wrote " << n << " samples to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowood: normalizing-flow density models for images, with likelihood-based "
                 "out-of-distribution detection"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "print help for every subcommand");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a model by maximum likelihood");
    t->add_option("--model", train.model, "glow or waveletflow")
        ->required()
        ->check(CLI::IsMember({"glow", "waveletflow"}));
    t->add_option("--data", train.data_dir, "directory of .png/.ppm training images")->required();
    t->add_option("--config", train.config_path, "key = value config file");
    t->add_option("--preset", train.preset, "hyperparameter preset")
        ->check(CLI::IsMember({"channel-wise", "checker", "cycle-1"}));
    t->add_option("--level", train.level, "waveletflow: train only this level (n = base flow)");
    t->add_option("--out", train.out, "checkpoint output path")->required();
    t->add_option("--history", train.history, "history CSV path (default: <out>.history.csv)");
    t->add_option("--resume", train.resume, "continue a checkpointed run; config comes from the file");
    auto* t_epochs = t->add_option("--epochs", train.epochs, "override epoch count");
    auto* t_batch = t->add_option("--batch-size", train.batch_size, "override batch size");
    auto* t_lr = t->add_option("--learning-rate", train.learning_rate, "override learning rate");
    auto* t_extent = t->add_option("--extent", train.extent, "override image extent");
    auto* t_channels = t->add_option("--channels", train.channels, "override channel count");
    auto* t_interval = t->add_option("--checkpoint-interval", train.interval,
                                     "write a checkpoint every N epochs (0 = final only)");
    auto* t_seed = t->add_option("--seed", train.seed, "training seed (FLOWOOD_SEED is the fallback)");
    auto* t_level = t->get_option("--level"); // registered above with the contract flags

    ScoreArgs score;
    auto* s = app.add_subcommand("score", "score a dataset under a trained model");
    s->add_option("--ckpt", score.ckpt, "checkpoint to score with")->required();
    s->add_option("--data", score.data_dir, "directory of images to score")->required();
    s->add_option("--split-label", score.split_label, "split column value for scores.csv");
    s->add_option("--sigma", score.sigma, "multiplicative noise std before scoring")
        ->check(CLI::NonNegativeNumber);
    s->add_flag("--additive", score.additive, "use additive instead of multiplicative noise");
    s->add_flag("--per-level", score.per_level, "also emit per-level BPD histograms (waveletflow)");
    s->add_option("--sigmas", score.sigmas, "per-level sweep noise levels (default: --sigma)")
        ->delimiter(',');
    s->add_option("--out", score.out_dir, "output directory for scores.csv (+ levels.csv)")->required();
    auto* s_seed = s->add_option("--seed", score.seed, "dequantization/noise seed");
    s->add_option("--threads", score.threads, "scoring threads (default: machine cores)");

    std::string roc_in, roc_out, roc_path = "roc.csv";
    auto* r = app.add_subcommand("roc", "ROC/AUC from two score files");
    r->add_option("--in", roc_in, "scores.csv of the in-distribution split")->required();
    r->add_option("--out", roc_out, "scores.csv of the out-of-distribution split")->required();
    r->add_option("--roc", roc_path, "output curve path");

    std::string psd_data, psd_out = "psd.csv";
    std::int64_t psd_extent = 64, psd_channels = 3;
    auto* p = app.add_subcommand("psd", "radially averaged power spectral density of a dataset");
    p->add_option("--data", psd_data, "directory of images")->required();
    p->add_option("--extent", psd_extent, "square extent images are fitted to")
        ->check(CLI::PositiveNumber);
    p->add_option("--channels", psd_channels, "channels to load before luminance conversion")
        ->check(CLI::IsMember({1, 3}));
    p->add_option("--out", psd_out, "output curve path");

    std::string sample_ckpt, sample_out = "samples";
    std::int64_t sample_n = 16;
    double sample_temp = 1.0;
    std::uint64_t sample_seed = 0;
    auto* g = app.add_subcommand("sample", "draw images from a trained model");
    g->add_option("--ckpt", sample_ckpt, "checkpoint to sample from")->required();
    g->add_option("-n,--num", sample_n, "number of images")->check(CLI::PositiveNumber);
    g->add_option("--temperature", sample_temp, "latent scale")->check(CLI::NonNegativeNumber);
    auto* g_seed = g->add_option("--seed", sample_seed, "sampling seed");
    g->add_option("--out", sample_out, "output directory for PNG files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2; // usage problems are exit 2; --help is a success
    }

    try {
        if (t->parsed()) {
            train.epochs_set = t_epochs->count() > 0;
            train.batch_set = t_batch->count() > 0;
            train.lr_set = t_lr->count() > 0;
            train.extent_set = t_extent->count() > 0;
            train.channels_set = t_channels->count() > 0;
            train.interval_set = t_interval->count() > 0;
            train.seed_set = t_seed->count() > 0;
            train.level_set = t_level->count() > 0;
            return cmd_train(train);
        }
        if (s->parsed()) {
            score.seed_set = s_seed->count() > 0;
            return cmd_score(score);
        }
        if (r->parsed()) return cmd_roc(roc_in, roc_out, roc_path);
        if (p->parsed()) return cmd_psd(psd_data, psd_extent, psd_channels, psd_out);
        if (g->parsed())
            return cmd_sample(sample_ckpt, sample_n, sample_temp, sample_seed, g_seed->count() > 0,
                              sample_out);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
