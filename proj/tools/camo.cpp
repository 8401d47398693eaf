#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "camo/config.hpp"
#include "camo/evalharness.hpp"
#include "camo/image_io.hpp"

namespace fs = std::filesystem;
using namespace camo;

namespace {

corpus::CorpusParams corpus_params(const config::RunConfig& cfg) {
    corpus::CorpusParams p;
    p.image_size = cfg.corpus.image_size;
    p.train_count = cfg.corpus.train_count;
    p.val_count = cfg.corpus.val_count;
    p.test_count = cfg.corpus.test_count;
    p.base_seed = cfg.corpus.base_seed;
    return p;
}

backend::Autoencoder load_ae(const config::RunConfig& cfg) {
    backend::AutoencoderConfig acfg{cfg.corpus.image_size, cfg.backend.latent_channels, 4,
                                    cfg.backend.ae_base};
    backend::Autoencoder ae(acfg, 0);
    ae.load(cfg.backend.ae_checkpoint);
    return ae;
}

critic::Critic load_critic(const config::RunConfig& cfg) {
    critic::CriticConfig ccfg;
    ccfg.latent_channels = cfg.backend.latent_channels;
    ccfg.latent_size = cfg.corpus.image_size / 4;
    ccfg.classes = cfg.critic.classes;
    critic::Critic model(ccfg, 0);
    model.load(cfg.critic.checkpoint);
    return model;
}

detect::Detector load_detector_from(const std::string& dir, int image_size) {
    const std::string kind = nn::checkpoint_kind(dir);
    const std::string prefix = "detector_";
    if (kind.rfind(prefix, 0) != 0)
        throw ValidationError("checkpoint at " + dir + " is not a detector");
    detect::DetectorConfig dcfg{kind.substr(prefix.size()), image_size, image_size / 8};
    detect::Detector det(dcfg, 0);
    det.load(dir);
    return det;
}

backend::Denoiser load_denoiser(const config::RunConfig& cfg, const std::string& dir) {
    backend::Denoiser model(pipeline::make_denoiser_config(cfg), 0);
    model.load(dir);
    return model;
}

eval::EvalContext make_eval_context(const config::RunConfig& cfg, const corpus::Corpus& corpus,
                                    const backend::Autoencoder& ae,
                                    const backend::Denoiser& model,
                                    const std::vector<std::pair<std::string, detect::Detector>>& dets) {
    eval::EvalContext ctx;
    ctx.corpus = &corpus;
    ctx.ae = &ae;
    ctx.model = &model;
    for (const auto& [id, det] : dets) ctx.detectors.push_back({id, &det});
    ctx.sched = pipeline::make_schedule(cfg);
    ctx.strategy = cfg.strategy.to_strategy();
    ctx.sample_steps = pipeline::sample_steps_for(cfg);
    ctx.detect_conf = cfg.eval.detect_conf;
    ctx.nms_iou = cfg.eval.nms_iou;
    ctx.ssim_margin = cfg.eval.ssim_margin;
    ctx.seed = cfg.eval.seed;
    ctx.max_images = cfg.eval.max_images;
    ctx.split = cfg.eval.split;
    ctx.config_hash = config::config_hash(cfg);
    ctx.corpus_hash = corpus::corpus_manifest_hash(cfg.corpus.dir);
    return ctx;
}

pipeline::StageInputs make_stage_inputs(const config::RunConfig& cfg,
                                        const corpus::Corpus& corpus,
                                        const backend::Autoencoder& ae,
                                        const critic::Critic& critic_model,
                                        const detect::Detector* det) {
    pipeline::StageInputs in;
    in.corpus = &corpus;
    in.ae = &ae;
    in.critic_model = &critic_model;
    in.detector = det;
    in.sched = pipeline::make_schedule(cfg);
    in.strategy = cfg.strategy.to_strategy();
    in.config_hash = config::config_hash(cfg);
    return in;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"camokit: two-stage latent camouflage pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    int64_t seed_flag = -1;
    std::string out_dir;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed_flag, "seed override for this command");
    app.add_option("--out", out_dir, "output directory");

    auto* c_gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    auto* c_ae = app.add_subcommand("train-ae", "train the latent autoencoder");
    auto* c_critic = app.add_subcommand("train-critic", "train the latent feature critic");
    auto* c_det = app.add_subcommand("train-detector", "train a toy detector");
    auto* c_s1 = app.add_subcommand("train-stage1", "run the detector-free fine-tuning stage");
    auto* c_s2 = app.add_subcommand("train-stage2", "run the white-box fine-tuning stage");
    auto* c_one = app.add_subcommand("train-onestage", "run the joint one-stage ablation");
    auto* c_sample = app.add_subcommand("sample", "sample camouflaged images from a checkpoint");
    auto* c_eval = app.add_subcommand("eval", "run the measurement protocol");
    auto* c_evald = app.add_subcommand("eval-defense", "evaluate under a preprocessing defense");
    auto* c_evalt = app.add_subcommand("eval-transfer", "cross-background transfer evaluation");
    auto* c_report = app.add_subcommand("report", "render a table from saved eval reports");

    CLI11_PARSE(app, argc, argv);

    try {
        config::RunConfig cfg =
            config_path.empty() ? config::default_config() : config::load_config(config_path);
        const bool has_seed = seed_flag >= 0;

        if (c_gen->parsed()) {
            if (has_seed) cfg.corpus.base_seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? cfg.corpus.dir : out_dir;
            corpus::Corpus c = corpus::build_corpus(corpus_params(cfg));
            corpus::write_corpus(c, dir);
            std::cout << "wrote " << c.records.size() << " records to " << dir << "\n";
        } else if (c_ae->parsed()) {
            if (has_seed) cfg.backend.ae_seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? cfg.backend.ae_checkpoint : out_dir;
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            backend::AutoencoderConfig acfg{cfg.corpus.image_size, cfg.backend.latent_channels, 4,
                                            cfg.backend.ae_base};
            backend::Autoencoder ae(acfg, mix_seed(cfg.backend.ae_seed, 0xaeULL));
            fs::create_directories(dir);
            auto stats = backend::train_autoencoder(ae, c, cfg.backend.ae_iterations,
                                                    cfg.backend.ae_batch, cfg.backend.ae_lr,
                                                    cfg.backend.ae_seed,
                                                    (fs::path(dir) / "train.log").string());
            ae.save(dir, config::config_hash(cfg));
            std::cout << "val PSNR: " << stats.val_psnr_db << " dB\n";

            // denoising-pretrained base model fine-tuned by the stages
            backend::Denoiser base(pipeline::make_denoiser_config(cfg),
                                   mix_seed(cfg.backend.base_seed, 0xbaULL));
            auto sched = pipeline::make_schedule(cfg);
            auto strategy = cfg.strategy.to_strategy();
            const int lat = cfg.corpus.image_size / 4;
            auto cond_of = [&](const corpus::SceneRecord& rec) {
                return backend::conditioning_maps(reference::build_conditioning(rec, strategy),
                                                  lat, lat);
            };
            fs::create_directories(cfg.backend.base_checkpoint);
            auto bstats = backend::pretrain_denoiser(
                base, c, ae, cond_of, sched, cfg.backend.base_iterations,
                cfg.backend.base_batch, cfg.backend.base_lr, cfg.backend.base_seed,
                (fs::path(cfg.backend.base_checkpoint) / "train.log").string());
            base.save(cfg.backend.base_checkpoint, config::config_hash(cfg));
            std::cout << "base model denoising loss: " << bstats.final_loss << "\n";
        } else if (c_critic->parsed()) {
            if (has_seed) cfg.critic.seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? cfg.critic.checkpoint : out_dir;
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            backend::Autoencoder ae = load_ae(cfg);
            critic::CriticConfig ccfg;
            ccfg.latent_channels = cfg.backend.latent_channels;
            ccfg.latent_size = cfg.corpus.image_size / 4;
            ccfg.classes = cfg.critic.classes;
            critic::Critic model(ccfg, mix_seed(cfg.critic.seed, 0xc1ULL));
            fs::create_directories(dir);
            auto stats = critic::train_critic(model, c, ae, cfg.critic.iterations,
                                              cfg.critic.batch, cfg.critic.lr, cfg.critic.seed,
                                              (fs::path(dir) / "train.log").string());
            model.save(dir, config::config_hash(cfg));
            std::cout << "held-out accuracy: " << stats.heldout_accuracy << "\n";
        } else if (c_det->parsed()) {
            if (has_seed) cfg.detector.seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? cfg.detector.checkpoint : out_dir;
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            detect::DetectorConfig dcfg{cfg.detector.variant, cfg.corpus.image_size,
                                        cfg.detector.grid};
            detect::Detector det(dcfg, mix_seed(cfg.detector.seed, 0xdeULL));
            fs::create_directories(dir);
            detect::train_detector(det, c, cfg.detector.iterations, cfg.detector.batch,
                                   cfg.detector.lr, cfg.detector.pos_weight, cfg.detector.seed,
                                   (fs::path(dir) / "train.log").string());
            det.save(dir, config::config_hash(cfg));
            std::cout << "saved detector (" << cfg.detector.variant << ") to " << dir << "\n";
        } else if (c_s1->parsed() || c_s2->parsed() || c_one->parsed()) {
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            backend::Autoencoder ae = load_ae(cfg);
            critic::Critic critic_model = load_critic(cfg);
            pipeline::Stage stage = c_s1->parsed() ? pipeline::Stage::no_box
                                   : c_s2->parsed() ? pipeline::Stage::white_box
                                                    : pipeline::Stage::one_stage;
            config::StageSection scfg = c_s1->parsed() ? cfg.stage1 : cfg.stage2;
            if (has_seed) scfg.seed = static_cast<uint64_t>(seed_flag);
            std::optional<detect::Detector> det;
            if (stage != pipeline::Stage::no_box) {
                if (scfg.detector_checkpoint.empty())
                    throw NotReadyError("stage requires detector_checkpoint in config");
                det = load_detector_from(scfg.detector_checkpoint, cfg.corpus.image_size);
            }
            pipeline::StageInputs in =
                make_stage_inputs(cfg, c, ae, critic_model, det ? &*det : nullptr);
            const std::string run_dir = !out_dir.empty()             ? out_dir
                                        : c_s1->parsed()             ? "runs/stage1"
                                        : c_s2->parsed()             ? "runs/stage2"
                                                                     : "runs/onestage";
            // stage 1 fine-tunes the pretrained base; stage 2 the stage-1
            // checkpoint; the one-stage ablation starts from the base.
            const std::string init = stage == pipeline::Stage::one_stage
                                         ? cfg.backend.base_checkpoint
                                         : scfg.init_checkpoint;
            const std::string final_dir = pipeline::train_stage(stage, in, scfg, run_dir, init);
            std::cout << "final checkpoint: " << final_dir << "\n";
        } else if (c_sample->parsed()) {
            if (has_seed) cfg.eval.seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? "runs/samples" : out_dir;
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            backend::Autoencoder ae = load_ae(cfg);
            backend::Denoiser model = load_denoiser(cfg, cfg.eval.checkpoint);
            fs::create_directories(dir);
            auto records = c.split(cfg.eval.split);
            const int n = cfg.eval.max_images > 0
                              ? std::min<int>(cfg.eval.max_images, records.size())
                              : std::min<int>(8, records.size());
            for (int i = 0; i < n; ++i) {
                auto inf = pipeline::infer(model, ae, *records[i], cfg.strategy.to_strategy(),
                                           pipeline::make_schedule(cfg),
                                           pipeline::sample_steps_for(cfg), cfg.eval.seed);
                io::write_png_rgb8((fs::path(dir) / ("camouflaged_" + records[i]->id + ".png")).string(),
                                   inf.camouflaged);
                io::write_png_rgb8((fs::path(dir) / ("composited_" + records[i]->id + ".png")).string(),
                                   inf.composited);
            }
            std::cout << "wrote " << n << " samples to " << dir << "\n";
        } else if (c_eval->parsed() || c_evald->parsed() || c_evalt->parsed()) {
            if (has_seed) cfg.eval.seed = static_cast<uint64_t>(seed_flag);
            const std::string dir = out_dir.empty() ? "runs/eval" : out_dir;
            corpus::Corpus c = corpus::read_corpus(cfg.corpus.dir);
            backend::Autoencoder ae = load_ae(cfg);
            backend::Denoiser model = load_denoiser(cfg, cfg.eval.checkpoint);
            if (cfg.eval.detectors.empty())
                throw NotReadyError("eval: no detectors configured");
            std::vector<std::pair<std::string, detect::Detector>> dets;
            for (const auto& d : cfg.eval.detectors)
                dets.emplace_back(d.id, load_detector_from(d.checkpoint, cfg.corpus.image_size));
            eval::EvalContext ctx = make_eval_context(cfg, c, ae, model, dets);
            eval::EvalReport report;
            if (c_evalt->parsed())
                report = eval::evaluate_cross_background(ctx, dir, cfg.eval.n_backgrounds);
            else if (c_evald->parsed())
                report = eval::evaluate_defended(ctx, dir, cfg.eval.defense);
            else
                report = eval::evaluate(ctx, dir);
            std::cout << eval::render_table(report);
        } else if (c_report->parsed()) {
            if (cfg.eval.report_inputs.empty())
                throw ValidationError("report: eval.report_inputs is empty");
            eval::EvalReport merged;
            for (const auto& path : cfg.eval.report_inputs) {
                eval::EvalReport r = eval::read_report(path);
                merged.config_hash = r.config_hash;
                merged.corpus_manifest_hash = r.corpus_manifest_hash;
                for (auto& row : r.rows) merged.rows.push_back(std::move(row));
            }
            const std::string table = eval::render_table(merged);
            std::cout << table;
            if (!out_dir.empty()) {
                fs::create_directories(out_dir);
                std::ofstream tf(fs::path(out_dir) / "report.txt");
                tf << table;
                eval::write_report(merged, (fs::path(out_dir) / "report.json").string());
            }
        }
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const NotReadyError& e) {
        std::cerr << "not ready: " << e.what() << "\n";
        return 3;
    } catch (const LoadError& e) {
        std::cerr << "load error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
