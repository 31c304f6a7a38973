// Command-line front end: dataset generation, victim training, serving,
// extraction attacks, evaluation, and report rendering.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include <mimic/experiment.hpp>
#include <mimic/oracle_http.hpp>

namespace {

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop = true; }

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot open config file '" << path << "'\n";
    std::exit(2);
  }
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const std::exception& e) {
    std::cerr << "error: config file '" << path << "': " << e.what() << '\n';
    std::exit(2);
  }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

void log_line(const std::string& m) { std::printf("%s\n", m.c_str()); }

}  // namespace

int main(int argc, char** argv) {
  using namespace mimic;
  CLI::App app{"Data-free model extraction workbench for single-object detectors"};
  app.require_subcommand(1);
  std::function<void()> action;

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  {
    struct {
      std::string spec_file, out;
      DatasetSpec spec;
    } static o;
    gen->add_option("--spec", o.spec_file, "DatasetSpec JSON file (flags override it)");
    gen->add_option("--out", o.out, "output dataset directory")->required();
    auto* classes = gen->add_option("--classes", o.spec.class_count, "number of classes")
                        ->capture_default_str();
    auto* side =
        gen->add_option("--side", o.spec.image_side, "square image side")->capture_default_str();
    auto* count = gen->add_option("--count", o.spec.sample_count, "number of samples")
                      ->capture_default_str();
    auto* seed = gen->add_option("--seed", o.spec.seed, "generation seed")->capture_default_str();
    auto* bg = gen->add_option("--background", o.spec.background, "solid | noise")
                   ->capture_default_str();
    gen->callback([&, classes, side, count, seed, bg] {
      action = [&, classes, side, count, seed, bg] {
        DatasetSpec spec;
        if (!o.spec_file.empty()) spec = read_json_file(o.spec_file).get<DatasetSpec>();
        if (classes->count()) spec.class_count = o.spec.class_count;
        if (side->count()) spec.image_side = o.spec.image_side;
        if (count->count()) spec.sample_count = o.spec.sample_count;
        if (seed->count()) spec.seed = o.spec.seed;
        if (bg->count()) spec.background = o.spec.background;
        int n = generate_shapes_dataset(spec, o.out);
        std::printf("wrote %d images under %s\n", n, o.out.c_str());
      };
    });
  }

  // ---- train-victim ----
  auto* tv = app.add_subcommand("train-victim", "Train the victim detector on a dataset");
  {
    struct {
      std::string data, out, config, history, arch = "victim-a";
      VictimTrainConfig cfg;
    } static o;
    tv->add_option("--data", o.data, "dataset directory")->required();
    tv->add_option("--out", o.out, "output checkpoint path")->required();
    tv->add_option("--config", o.config, "VictimTrainConfig JSON file (flags override it)");
    tv->add_option("--history", o.history, "write per-epoch history JSONL here");
    tv->add_option("--arch", o.arch, "victim network preset")->capture_default_str();
    auto* epochs =
        tv->add_option("--epochs", o.cfg.epochs, "training epochs")->capture_default_str();
    auto* batch =
        tv->add_option("--batch", o.cfg.batch_size, "minibatch size")->capture_default_str();
    auto* lr = tv->add_option("--lr", o.cfg.lr, "initial learning rate")->capture_default_str();
    auto* seed = tv->add_option("--seed", o.cfg.seed, "training seed")->capture_default_str();
    tv->callback([&, epochs, batch, lr, seed] {
      action = [&, epochs, batch, lr, seed] {
        VictimTrainConfig cfg;
        if (!o.config.empty()) cfg = read_json_file(o.config).get<VictimTrainConfig>();
        if (epochs->count()) cfg.epochs = o.cfg.epochs;
        if (batch->count()) cfg.batch_size = o.cfg.batch_size;
        if (lr->count()) cfg.lr = o.cfg.lr;
        if (seed->count()) cfg.seed = o.cfg.seed;
        Dataset ds = load_dataset(o.data);
        NetworkSpec spec = preset_spec(o.arch);
        spec.class_count = ds.class_count;
        spec.input_side = ds.side();
        auto victim = build_detector<float>(spec, derive_seed(cfg.seed, 0xd9u));
        TrainHistory h = train_victim(victim, ds, cfg, [](const EpochRecord& e) {
          std::printf("epoch %d  loss %.4f  cls %.4f  reg %.4f  lr %.5f\n", e.epoch,
                      e.train_loss, e.cls_loss, e.reg_loss, e.lr);
        });
        if (!o.history.empty()) h.save_jsonl(o.history);
        save_detector(o.out, spec, victim);
        std::printf("checkpoint written to %s\n", o.out.c_str());
      };
    });
  }

  // ---- serve-victim ----
  auto* sv = app.add_subcommand("serve-victim", "Serve a victim checkpoint over HTTP");
  {
    struct {
      std::string ckpt, host = "127.0.0.1", victim_id = "victim";
      long long budget = 1'000'000;
      int port = 8080;
    } static o;
    sv->add_option("--ckpt", o.ckpt, "victim checkpoint")->required();
    sv->add_option("--budget", o.budget, "total image-query budget")->capture_default_str();
    sv->add_option("--host", o.host, "bind address")->capture_default_str();
    sv->add_option("--port", o.port, "port (0 picks a free one)")->capture_default_str();
    sv->add_option("--victim-id", o.victim_id, "identifier reported by /v1/info")
        ->capture_default_str();
    sv->callback([&] {
      action = [&] {
        auto loaded = load_detector<float>(o.ckpt, "victim");
        OracleServer server(loaded.net, o.budget, o.host, o.port, o.victim_id);
        std::printf("serving %s at %s with budget %lld (Ctrl-C stops)\n", o.victim_id.c_str(),
                    server.url().c_str(), o.budget);
        std::fflush(stdout);
        std::signal(SIGINT, handle_signal);
        std::signal(SIGTERM, handle_signal);
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
        std::printf("stopped; consumed %lld\n", server.oracle().consumed());
      };
    });
  }

  // ---- attack ----
  auto* atk = app.add_subcommand("attack", "Run the extraction attack against an oracle");
  {
    struct {
      std::string config, url, victim_ckpt, out, data, student = "student-a",
                                                   generator = "generator-a";
      bool resume = false;
      AttackConfig cfg;
    } static o;
    atk->add_option("--config", o.config, "AttackConfig JSON file (flags override it)");
    atk->add_option("--url", o.url, "HTTP oracle base URL");
    atk->add_option("--victim-ckpt", o.victim_ckpt, "serve this checkpoint in-process instead");
    atk->add_option("--out", o.out, "output directory for checkpoints and history")->required();
    atk->add_option("--data", o.data, "held-out dataset directory for eval snapshots");
    atk->add_option("--student", o.student, "student network preset")->capture_default_str();
    atk->add_option("--generator", o.generator, "generator network preset")
        ->capture_default_str();
    atk->add_flag("--resume", o.resume, "continue from checkpointed state in --out");
    auto* budget = atk->add_option("--budget", o.cfg.query_budget, "total image-query budget Q")
                       ->capture_default_str();
    auto* seed = atk->add_option("--seed", o.cfg.seed, "attack seed")->capture_default_str();
    atk->callback([&, budget, seed] {
      action = [&, budget, seed] {
        AttackConfig cfg;
        if (!o.config.empty()) cfg = read_json_file(o.config).get<AttackConfig>();
        if (budget->count()) cfg.query_budget = o.cfg.query_budget;
        if (seed->count()) cfg.seed = o.cfg.seed;
        if (o.url.empty() == o.victim_ckpt.empty())
          throw std::runtime_error("pass exactly one of --url or --victim-ckpt");

        std::optional<LoadedDetector<float>> victim;
        std::optional<InProcessOracle> local;
        std::optional<HttpOracle> remote;
        Oracle* oracle = nullptr;
        if (!o.victim_ckpt.empty()) {
          victim.emplace(load_detector<float>(o.victim_ckpt, "victim"));
          local.emplace(victim->net, cfg.query_budget);
          oracle = &*local;
        } else {
          remote.emplace(o.url);
          oracle = &*remote;
        }
        const OracleInfo info = oracle->info();

        std::optional<Attacker> attacker;
        if (o.resume) {
          attacker.emplace(Attacker::resume_from(o.out));
          if (local) local->budget().restore_consumed(attacker->consumed());
        } else {
          NetworkSpec sspec = preset_spec(o.student);
          sspec.class_count = info.class_count;
          sspec.input_side = info.height;
          NetworkSpec gspec = preset_spec(o.generator);
          gspec.input_side = info.height;
          cfg.latent_dim = gspec.latent_dim;
          attacker.emplace(cfg, sspec, gspec);
        }

        std::optional<Dataset> eval_set;
        if (!o.data.empty()) eval_set = load_dataset(o.data);
        AttackCallbacks cb;
        cb.on_iteration = [](const OuterRecord& r) {
          if (r.iteration == 1 || r.iteration % 25 == 0 || r.eval)
            std::printf("iter %lld  consumed %lld  gen %.4f  stu %.4f%s\n", r.iteration,
                        r.consumed, r.generator_loss, r.student_loss,
                        r.eval ? ("  acc " + std::to_string(r.eval->accuracy)).c_str() : "");
        };
        AttackResult res =
            attacker->run(*oracle, eval_set ? &*eval_set : nullptr, o.out, cb);
        std::printf("%s after %lld iterations, %lld queries consumed: %s\n",
                    to_string(res.status), res.outer_iterations, res.consumed,
                    res.message.c_str());
        if (res.status == AttackStatus::TransportHalted) throw std::runtime_error(res.message);
      };
    });
  }

  // ---- evaluate ----
  auto* ev = app.add_subcommand("evaluate", "Evaluate a detector checkpoint on a dataset");
  {
    struct {
      std::string model, data, out;
      double threshold = 0.5;
    } static o;
    ev->add_option("--model", o.model, "victim or student checkpoint")->required();
    ev->add_option("--data", o.data, "dataset directory")->required();
    ev->add_option("--out", o.out, "write the EvalReport JSON here");
    ev->add_option("--threshold", o.threshold, "IoU threshold for detection success")
        ->capture_default_str();
    ev->callback([&] {
      action = [&] {
        auto loaded = load_detector<float>(o.model, "detector");
        Dataset ds = load_dataset(o.data);
        EvalReport rep = evaluate_detector(loaded.net, ds, o.threshold);
        std::printf("accuracy %.4f  mean IoU %.4f  detection success %.4f  (n=%d)\n",
                    rep.accuracy, rep.mean_iou, rep.detection_success, rep.samples);
        if (!o.out.empty()) write_json_file(o.out, rep);
      };
    });
  }

  // ---- report ----
  auto* rp = app.add_subcommand("report",
                                "Render a baseline/attack comparison table and figures");
  {
    struct {
      std::string baseline, attack, out, victim = "victim", student = "student";
      std::string victim_ckpt, student_ckpt, generator_ckpt, data, history;
    } static o;
    rp->add_option("--baseline", o.baseline, "victim EvalReport JSON")->required();
    rp->add_option("--attack", o.attack, "student EvalReport JSON")->required();
    rp->add_option("--out", o.out, "output directory")->required();
    rp->add_option("--victim", o.victim, "victim label")->capture_default_str();
    rp->add_option("--student", o.student, "student label")->capture_default_str();
    rp->add_option("--victim-ckpt", o.victim_ckpt, "victim checkpoint (enables overlays)");
    rp->add_option("--student-ckpt", o.student_ckpt, "student checkpoint (enables overlays)");
    rp->add_option("--generator-ckpt", o.generator_ckpt,
                   "generator checkpoint (enables the scatter figure)");
    rp->add_option("--data", o.data, "dataset directory for figures");
    rp->add_option("--history", o.history, "attack history JSONL (enables the accuracy curve)");
    rp->callback([&] {
      action = [&] {
        namespace fs = std::filesystem;
        EvalReport base = read_json_file(o.baseline).get<EvalReport>();
        EvalReport atk_rep = read_json_file(o.attack).get<EvalReport>();
        ComparisonReport cmp = compare(base, atk_rep);
        fs::create_directories(o.out);
        const std::vector<ComparisonRow> rows{{o.victim, o.student, cmp}};
        const std::string table = comparison_table_text(rows);
        std::fputs(table.c_str(), stdout);
        std::ofstream(fs::path(o.out) / "table.txt") << table;
        std::ofstream(fs::path(o.out) / "table.csv") << comparison_table_csv(rows);
        write_json_file((fs::path(o.out) / "report.json").string(), nlohmann::json(cmp));

        const fs::path fig_dir = fs::path(o.out) / "figures";
        if (!o.history.empty()) {
          RunHistory h = RunHistory::load_jsonl(o.history);
          std::vector<CurvePoint> pts;
          for (const auto& r : h.records)
            if (r.eval) pts.push_back({static_cast<double>(r.consumed), r.eval->accuracy});
          if (!pts.empty()) {
            fs::create_directories(fig_dir);
            accuracy_curve(pts, (fig_dir / "accuracy_curve.png").string());
          }
        }
        if (!o.data.empty() && !o.victim_ckpt.empty() && !o.student_ckpt.empty()) {
          Dataset ds = load_dataset(o.data);
          auto victim = load_detector<float>(o.victim_ckpt, "victim");
          auto student = load_detector<float>(o.student_ckpt, "student");
          fs::create_directories(fig_dir);
          const int n = std::min(8, ds.size());
          std::vector<int> idx(n);
          for (int i = 0; i < n; ++i) idx[i] = i;
          Tensor<float> imgs = gather_items(ds.images, idx);
          const auto vdets = victim.net.detect(imgs);
          const auto sdets = student.net.detect(imgs);
          std::vector<std::array<double, 4>> gt, vb, sb;
          for (int i = 0; i < n; ++i) {
            gt.push_back(ds.boxes[i].as_array());
            vb.push_back(repair_box(vdets[i].box));
            sb.push_back(repair_box(sdets[i].box));
          }
          render_overlays(imgs, gt, vb, sb, (fig_dir / "overlays").string());
          if (!o.generator_ckpt.empty()) {
            auto gen = load_generator<float>(o.generator_ckpt);
            Rng rng(1);
            const int ns = std::min(100, ds.size());
            auto z = sample_latent<float>(ns, gen.net.latent_dim(), LatentDist::Gaussian, rng);
            Tensor<float> gimgs = gen.net.forward(z, false);
            std::vector<int> sidx(ns);
            for (int i = 0; i < ns; ++i) sidx[i] = i;
            latent_scatter(gimgs, gather_items(ds.images, sidx),
                           (fig_dir / "scatter.png").string());
          }
        }
        std::printf("report written to %s\n", o.out.c_str());
      };
    });
  }

  // ---- run-all ----
  auto* ra = app.add_subcommand("run-all", "Run the full pipeline from one config file");
  {
    struct {
      std::string config, name, out_root;
      std::uint64_t seed = 0;
      bool resume = false;
    } static o;
    ra->add_option("--config", o.config, "ExperimentConfig JSON file")->required();
    auto* seed = ra->add_option("--seed", o.seed, "override the global seed");
    auto* name = ra->add_option("--name", o.name, "override the run name");
    auto* root = ra->add_option("--out-root", o.out_root, "override the output root");
    ra->add_flag("--resume", o.resume, "reuse finished stages in the existing run directory");
    ra->callback([&, seed, name, root] {
      action = [&, seed, name, root] {
        ExperimentConfig cfg = read_json_file(o.config).get<ExperimentConfig>();
        if (seed->count()) cfg.seed = o.seed;
        if (name->count()) cfg.name = o.name;
        if (root->count()) cfg.out_root = o.out_root;
        ExperimentResult res = run_all(cfg, o.resume, log_line);
        const std::vector<ComparisonRow> rows{{cfg.victim, cfg.student, res.comparison}};
        std::fputs(comparison_table_text(rows).c_str(), stdout);
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
