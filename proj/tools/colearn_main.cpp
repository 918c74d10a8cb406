// colearn: one binary, one subcommand per pipeline stage. All randomness is
// seed-driven; COLEARN_THREADS caps worker threads. Exit codes: 0 ok,
// 1 usage, 2 data/validation, 3 numeric failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "colearn/pipeline.hpp"

namespace {

colearn::RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return colearn::RunConfig{};
  return colearn::load_run_config(path);
}

void apply_threads_env() {
  const char* t = std::getenv("COLEARN_THREADS");
  if (!t || !*t) return;
  char* end = nullptr;
  const long n = std::strtol(t, &end, 10);
  if (!end || *end != '\0' || n < 1 || n > 1024)
    throw colearn::UsageError("COLEARN_THREADS must be an integer in [1,1024]");
  colearn::set_num_threads(int(n));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"co-learning pipeline: attention CNN on chest volumes fused "
               "with clinical features via boosted trees"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, model_path, subject_id, ids_path;
  std::string preset, image_feats_path, labels_path;
  std::vector<std::string> score_specs;
  int64_t gen_n = 40, gen_side = 32;
  double gen_balance = 0.76, gen_rmin = 3.0, gen_rmax = 5.0;
  uint64_t seed = 0;
  bool seed_given = false;
  int batch_size = 4;

  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "override every seed used by this stage")
        ->each([&](const std::string&) { seed_given = true; });
  };

  CLI::App* gen = app.add_subcommand("gen-phantom", "generate a synthetic dataset");
  gen->add_option("--out", out_path, "output dataset directory")->required();
  gen->add_option("--n", gen_n, "number of subjects");
  gen->add_option("--side", gen_side, "cubic volume side in voxels");
  gen->add_option("--balance", gen_balance, "malignant fraction");
  gen->add_option("--radius-min", gen_rmin, "smallest nodule radius, voxels");
  gen->add_option("--radius-max", gen_rmax, "largest nodule radius, voxels");
  gen->add_option("--preset", preset, "scenario preset: IMG_STRONG or COMPLEMENTARY");
  add_seed(gen);
  gen->callback([&] {
    colearn::PhantomConfig cfg;
    cfg.n_subjects = gen_n;
    cfg.side = gen_side;
    cfg.class_balance = gen_balance;
    cfg.nodule_radius_min = gen_rmin;
    cfg.nodule_radius_max = gen_rmax;
    if (seed_given) cfg.seed = seed;
    if (!preset.empty()) colearn::apply_preset(cfg, preset);
    colearn::generate_phantom_dataset(cfg, out_path);
  });

  CLI::App* pre = app.add_subcommand("preprocess", "resample, normalize, crop");
  pre->add_option("--config", config_path, "run config JSON");
  pre->add_option("--data", data_path, "input dataset directory")->required();
  pre->add_option("--out", out_path, "output dataset directory")->required();
  pre->callback([&] {
    const colearn::RunConfig cfg = load_config_or_default(config_path);
    colearn::run_preprocess(data_path, out_path, cfg.preprocess);
  });

  CLI::App* tc = app.add_subcommand("train-cnn", "train the attention network");
  tc->add_option("--config", config_path, "run config JSON");
  tc->add_option("--data", data_path, "preprocessed dataset directory")->required();
  tc->add_option("--out", out_path, "output directory")->required();
  add_seed(tc);
  tc->callback([&] {
    colearn::RunConfig cfg = load_config_or_default(config_path);
    if (seed_given) {
      cfg.train.seed = seed;
      cfg.split.seed = seed;
    }
    colearn::run_train_cnn(data_path, out_path, cfg);
  });

  CLI::App* pc = app.add_subcommand("predict-cnn", "run inference, export features");
  pc->add_option("--data", data_path, "preprocessed dataset directory")->required();
  pc->add_option("--model", model_path, "checkpoint directory")->required();
  pc->add_option("--out", out_path, "output directory")->required();
  pc->add_option("--ids", ids_path, "file of subject ids, one per line (default all)");
  pc->add_option("--batch-size", batch_size, "inference batch size");
  pc->callback([&] {
    std::filesystem::create_directories(out_path);
    std::optional<std::vector<std::string>> ids;
    if (!ids_path.empty()) ids = colearn::read_id_list(ids_path);
    colearn::run_predict_cnn(
        data_path, model_path,
        (std::filesystem::path(out_path) / "predictions.csv").string(), ids,
        batch_size);
  });

  CLI::App* tf = app.add_subcommand("train-fusion", "fit the boosted-tree classifier");
  tf->add_option("--config", config_path, "run config JSON");
  tf->add_option("--data", data_path, "dataset directory with clinical.csv")->required();
  tf->add_option("--out", out_path, "output directory")->required();
  tf->add_option("--image-features", image_feats_path,
                 "prediction CSV from predict-cnn; omit for clinical-only");
  add_seed(tf);
  tf->callback([&] {
    colearn::RunConfig cfg = load_config_or_default(config_path);
    if (seed_given) {
      cfg.gbdt.seed = seed;
      cfg.split.seed = seed;
    }
    std::optional<std::string> feats;
    if (!image_feats_path.empty()) feats = image_feats_path;
    colearn::run_train_fusion(data_path, out_path, cfg, feats);
  });

  CLI::App* ev = app.add_subcommand("evaluate", "score methods against labels");
  ev->add_option("--scores", score_specs, "method score file as name=path")
      ->required()
      ->expected(-1);
  ev->add_option("--labels", labels_path, "labels CSV")->required();
  ev->add_option("--ids", ids_path, "restrict to subject ids listed in this file");
  ev->add_option("--out", out_path, "output directory")->required();
  ev->callback([&] {
    std::vector<colearn::EvaluateMethod> methods;
    for (const auto& spec : score_specs) {
      const size_t eq = spec.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
        throw colearn::UsageError("--scores expects name=path, got '" + spec + "'");
      methods.push_back({spec.substr(0, eq), spec.substr(eq + 1)});
    }
    std::optional<std::vector<std::string>> ids;
    if (!ids_path.empty()) ids = colearn::read_id_list(ids_path);
    colearn::run_evaluate(methods, labels_path, ids, out_path);
  });

  CLI::App* ax = app.add_subcommand("attention-export", "export one subject's gate map");
  ax->add_option("--data", data_path, "preprocessed dataset directory")->required();
  ax->add_option("--model", model_path, "checkpoint directory")->required();
  ax->add_option("--subject", subject_id, "subject id")->required();
  ax->add_option("--out", out_path, "output directory")->required();
  ax->callback([&] {
    colearn::run_attention_export(data_path, model_path, subject_id, out_path);
  });

  CLI::App* cv = app.add_subcommand("crossval", "fixed test set + k-fold protocol");
  cv->add_option("--config", config_path, "run config JSON");
  cv->add_option("--data", data_path, "preprocessed dataset directory")->required();
  cv->add_option("--out", out_path, "output directory")->required();
  add_seed(cv);
  cv->callback([&] {
    colearn::RunConfig cfg = load_config_or_default(config_path);
    if (seed_given) {
      cfg.train.seed = seed;
      cfg.split.seed = seed;
    }
    colearn::run_crossval(data_path, out_path, cfg);
  });

  try {
    apply_threads_env();
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const colearn::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const colearn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const colearn::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
