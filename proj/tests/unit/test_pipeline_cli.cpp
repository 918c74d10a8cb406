#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "catch_amalgamated.hpp"
#include "colearn/phantom.hpp"
#include "colearn/pipeline.hpp"

using namespace colearn;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

fs::path work_root() {
  struct Root {
    fs::path p;
    Root() {
      p = fs::temp_directory_path() / ("colearn_cli_" + std::to_string(::getpid()));
      fs::remove_all(p);
      fs::create_directories(p);
    }
    ~Root() {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  };
  static Root root;
  return root.p;
}

int run_cli(const std::string& args, std::string* output = nullptr,
            const std::string& env = {}) {
  static int counter = 0;
  const fs::path log = work_root() / ("cli_log_" + std::to_string(counter++));
  const std::string cmd = (env.empty() ? "" : env + " ") +
                          std::string(COLEARN_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (output) {
    std::ifstream f(log);
    output->assign((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  }
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::vector<char>> slurp_tree(const fs::path& root) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
    out[fs::relative(e.path(), root).generic_string()] = std::move(bytes);
  }
  return out;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
  REQUIRE(f.good());
}

// an 8-subject dataset preprocessed and trained for one epoch; built once,
// reused by the artifact and inference tests below
struct Fixture {
  fs::path raw, pp, cfg, train_out;
  Fixture() {
    raw = work_root() / "raw8";
    pp = work_root() / "pp8";
    cfg = work_root() / "cfg.json";
    train_out = work_root() / "train8";

    PhantomConfig pc;
    pc.n_subjects = 8;
    pc.side = 16;
    pc.class_balance = 0.5;
    pc.nodule_radius_min = 2.0;
    pc.nodule_radius_max = 3.0;
    pc.seed = 7;
    generate_phantom_dataset(pc, raw.string());

    write_text(cfg, R"({
  "preprocess": {"side": 16},
  "network": {"input_side": 16, "stage_channels": [2, 3, 4, 5]},
  "train": {"epochs": 1, "batch_size": 4, "seed": 5},
  "split": {"seed": 5}
})");
    REQUIRE(run_cli("preprocess --config " + cfg.string() + " --data " +
                    raw.string() + " --out " + pp.string()) == 0);
    REQUIRE(run_cli("train-cnn --config " + cfg.string() + " --data " +
                    pp.string() + " --out " + train_out.string()) == 0);
  }
};

const Fixture& fx() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("config defaults match the module-level defaults", "[cli]") {
  const nlohmann::ordered_json j =
      run_config_to_json(parse_run_config(nlohmann::json::object()));

  CHECK(j["preprocess"]["window_lo"] == -1000.0);
  CHECK(j["preprocess"]["window_hi"] == 400.0);
  CHECK(j["preprocess"]["side"] == 32);
  CHECK(j["preprocess"]["pad_hu"] == 170.0);
  CHECK(j["preprocess"]["target_spacing_mm"] == 1.0);
  CHECK(j["preprocess"]["lung_mask_fallback"] == false);

  CHECK(j["network"]["input_side"] == 32);
  CHECK(j["network"]["stage_channels"] == std::vector<int64_t>({8, 16, 32, 64}));
  CHECK(j["network"]["kernel"] == 3);
  CHECK(j["network"]["num_maxpools"] == 3);
  CHECK(j["network"]["sag_source_stage"] == 2);
  CHECK(j["network"]["sag_gating_stage"] == 3);
  CHECK(j["network"]["sag_intermediate_channels"] == 0);
  CHECK(j["network"]["num_classes"] == 2);

  CHECK(j["train"]["learning_rate"] == 1e-4);
  CHECK(j["train"]["batch_size"] == 4);
  CHECK(j["train"]["epochs"] == 100);
  CHECK(j["train"]["beta1"] == 0.9);
  CHECK(j["train"]["beta2"] == 0.999);
  CHECK(j["train"]["eps"] == 1e-8);
  CHECK(j["train"]["seed"] == 0);
  CHECK(j["train"]["class_weights"].is_null());
  CHECK(j["train"]["aux_training_manifest"].is_null());
  CHECK(j["train"]["augment_rotation_deg"] == 10.0);
  CHECK(j["train"]["augment_shift_voxels"] == 4);

  CHECK(j["gbdt"]["num_rounds"] == 100);
  CHECK(j["gbdt"]["max_depth"] == 3);
  CHECK(j["gbdt"]["eta"] == 0.1);
  CHECK(j["gbdt"]["lambda"] == 1.0);
  CHECK(j["gbdt"]["gamma"] == 0.0);
  CHECK(j["gbdt"]["min_child_weight"] == 1.0);
  CHECK(j["gbdt"]["colsample_bytree"] == 1.0);
  CHECK(j["gbdt"]["seed"] == 0);

  CHECK(j["split"]["test_frac"] == 0.2);
  CHECK(j["split"]["folds"] == 4);
  CHECK(j["split"]["fold"] == 0);
  CHECK(j["split"]["seed"] == 0);
}

TEST_CASE("config parsing rejects unknown keys and bad values", "[cli]") {
  using nlohmann::json;
  CHECK_THROWS_WITH(parse_run_config(json::parse(R"({"trian": {}})")),
                    ContainsSubstring("unknown key 'trian'"));
  CHECK_THROWS_WITH(parse_run_config(json::parse(R"({"train": {"epochz": 3}})")),
                    ContainsSubstring("unknown key 'epochz'"));
  CHECK_THROWS_WITH(
      parse_run_config(json::parse(R"({"network": {"channels": [2]}})")),
      ContainsSubstring("unknown key 'channels'"));
  CHECK_THROWS_WITH(parse_run_config(json::parse(R"({"gbdt": {"etaa": 0.1}})")),
                    ContainsSubstring("unknown key 'etaa'"));
  CHECK_THROWS_WITH(parse_run_config(json::parse(R"({"split": {"k": 4}})")),
                    ContainsSubstring("unknown key 'k'"));
  CHECK_THROWS_WITH(
      parse_run_config(json::parse(R"({"preprocess": {"window": 1}})")),
      ContainsSubstring("unknown key 'window'"));
  CHECK_THROWS_WITH(
      parse_run_config(json::parse(R"({"train": {"epochs": "ten"}})")),
      ContainsSubstring("bad value for 'epochs'"));
  CHECK_THROWS_WITH(parse_run_config(json::parse(R"({"train": 3})")),
                    ContainsSubstring("must be an object"));
}

TEST_CASE("class weight configuration accepts the three documented forms", "[cli]") {
  using nlohmann::json;
  RunConfig inv = parse_run_config(json::parse(R"({"train": {"class_weights": "inverse"}})"));
  CHECK(inv.inverse_class_weights);
  CHECK(run_config_to_json(inv)["train"]["class_weights"] == "inverse");

  RunConfig arr = parse_run_config(json::parse(R"({"train": {"class_weights": [2.0, 1.0]}})"));
  REQUIRE(arr.train.class_weights.has_value());
  CHECK((*arr.train.class_weights)[0] == 2.0);
  CHECK((*arr.train.class_weights)[1] == 1.0);

  RunConfig off = parse_run_config(json::parse(R"({"train": {"class_weights": null}})"));
  CHECK_FALSE(off.inverse_class_weights);
  CHECK_FALSE(off.train.class_weights.has_value());

  CHECK_THROWS_WITH(
      parse_run_config(json::parse(R"({"train": {"class_weights": "balanced"}})")),
      ContainsSubstring("class_weights"));
  CHECK_THROWS_WITH(
      parse_run_config(json::parse(R"({"train": {"class_weights": [1, 2, 3]}})")),
      ContainsSubstring("class_weights"));
}

TEST_CASE("config serialization round-trips", "[cli]") {
  const auto text = R"({
    "preprocess": {"side": 24, "window_lo": -900.0, "lung_mask_fallback": true},
    "network": {"input_side": 24, "stage_channels": [4, 8], "num_maxpools": 1,
                "sag_source_stage": 0, "sag_gating_stage": 1},
    "train": {"epochs": 7, "learning_rate": 0.003, "class_weights": [1.5, 1.0],
              "augment_rotation_deg": 0.0, "augment_shift_voxels": 0},
    "gbdt": {"num_rounds": 12, "colsample_bytree": 0.5},
    "split": {"test_frac": 0.25, "folds": 3, "fold": 2, "seed": 11},
    "paths": {"data": "in", "out": "outdir"}
  })";
  const RunConfig a = parse_run_config(nlohmann::json::parse(text));
  const nlohmann::ordered_json ja = run_config_to_json(a);
  const RunConfig b = parse_run_config(ja);
  CHECK(run_config_to_json(b).dump() == ja.dump());
  CHECK(ja["preprocess"]["side"] == 24);
  CHECK(ja["train"]["class_weights"] == std::vector<double>({1.5, 1.0}));
  CHECK(ja["split"]["fold"] == 2);
  CHECK(ja["paths"]["data"] == "in");
}

TEST_CASE("label, score, and id files parse and round-trip", "[cli]") {
  const fs::path dir = work_root() / "csvs";
  fs::create_directories(dir);

  write_text(dir / "labels.csv", "subject_id,label\na,0\nb,1\n");
  const auto labels = read_labels_csv((dir / "labels.csv").string());
  CHECK(labels.at("a") == 0);
  CHECK(labels.at("b") == 1);
  write_text(dir / "bad_header.csv", "id,label\na,0\n");
  CHECK_THROWS_WITH(read_labels_csv((dir / "bad_header.csv").string()),
                    ContainsSubstring("unexpected header"));
  write_text(dir / "dup.csv", "subject_id,label\na,0\na,1\n");
  CHECK_THROWS_WITH(read_labels_csv((dir / "dup.csv").string()),
                    ContainsSubstring("duplicate subject"));
  write_text(dir / "bad_label.csv", "subject_id,label\na,2\n");
  CHECK_THROWS_WITH(read_labels_csv((dir / "bad_label.csv").string()),
                    ContainsSubstring("label must be 0 or 1"));

  write_scores_csv((dir / "scores.csv").string(), {{"a", 0.25}, {"b", 0.75}});
  const auto scores = read_scores_csv((dir / "scores.csv").string());
  REQUIRE(scores.size() == 2);
  CHECK(scores[0] == std::pair<std::string, double>{"a", 0.25});
  CHECK(scores[1] == std::pair<std::string, double>{"b", 0.75});
  write_text(dir / "preds.csv",
             "subject_id,image_feature_0,image_feature_1\na,0.3,0.7\n");
  const auto preds = read_scores_csv((dir / "preds.csv").string());
  REQUIRE(preds.size() == 1);
  CHECK(preds[0].second == 0.7);
  write_text(dir / "bad_score.csv", "subject_id,score\na,high\n");
  CHECK_THROWS_WITH(read_scores_csv((dir / "bad_score.csv").string()),
                    ContainsSubstring("bad score"));

  write_id_list((dir / "ids.txt").string(), {"a", "b", "c"});
  CHECK(read_id_list((dir / "ids.txt").string()) ==
        std::vector<std::string>{"a", "b", "c"});
  write_text(dir / "empty.txt", "");
  CHECK_THROWS_WITH(read_id_list((dir / "empty.txt").string()),
                    ContainsSubstring("no subject ids"));
}

TEST_CASE("gen-phantom is deterministic and seed-sensitive at the CLI", "[cli]") {
  const fs::path a = work_root() / "gen_a";
  const fs::path b = work_root() / "gen_b";
  const fs::path c = work_root() / "gen_c";
  const std::string common =
      "gen-phantom --n 6 --side 16 --balance 0.5 --radius-min 2 --radius-max 3 ";
  REQUIRE(run_cli(common + "--seed 3 --out " + a.string()) == 0);
  REQUIRE(run_cli(common + "--seed 3 --out " + b.string()) == 0);
  REQUIRE(run_cli(common + "--seed 4 --out " + c.string()) == 0);

  const auto ta = slurp_tree(a), tb = slurp_tree(b), tc = slurp_tree(c);
  REQUIRE(!ta.empty());
  CHECK(ta == tb);
  CHECK(tc.at("subjects/P0000/ct.raw") != ta.at("subjects/P0000/ct.raw"));
}

TEST_CASE("usage problems exit 1", "[cli]") {
  std::string out;
  CHECK(run_cli("", &out) == 1);
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("gen-phantom --n 4") == 1);  // --out is required
  CHECK(run_cli("evaluate --scores nameonly --labels x --out y", &out) == 1);
  CHECK_THAT(out, ContainsSubstring("name=path"));
  CHECK(run_cli("gen-phantom --out " + (work_root() / "never_used").string(),
                &out, "COLEARN_THREADS=abc") == 1);
  CHECK_THAT(out, ContainsSubstring("COLEARN_THREADS"));
}

TEST_CASE("data and validation problems exit 2", "[cli]") {
  std::string out;
  CHECK(run_cli("preprocess --data " + (work_root() / "missing").string() +
                " --out " + (work_root() / "unused").string(), &out) == 2);
  CHECK(run_cli("gen-phantom --side 16 --radius-max 8 --out " +
                (work_root() / "unused2").string(), &out) == 2);
  CHECK_THAT(out, ContainsSubstring("side/4"));

  const fs::path bad_cfg = work_root() / "bad_cfg.json";
  write_text(bad_cfg, R"({"train": {"epochz": 3}})");
  CHECK(run_cli("train-cnn --config " + bad_cfg.string() + " --data " +
                (work_root() / "missing").string() + " --out " +
                (work_root() / "unused3").string(), &out) == 2);
  CHECK_THAT(out, ContainsSubstring("unknown key"));

  const fs::path junk_cfg = work_root() / "junk_cfg.json";
  write_text(junk_cfg, "{not json");
  CHECK(run_cli("train-cnn --config " + junk_cfg.string() + " --data x --out y",
                &out) == 2);
  CHECK_THAT(out, ContainsSubstring("malformed config"));
}

TEST_CASE("preprocess is idempotent at the CLI", "[cli]") {
  const Fixture& f = fx();
  const fs::path again = work_root() / "pp8_again";
  REQUIRE(run_cli("preprocess --config " + f.cfg.string() + " --data " +
                  f.raw.string() + " --out " + again.string()) == 0);
  CHECK(slurp_tree(f.pp) == slurp_tree(again));
}

TEST_CASE("train-cnn writes the advertised artifacts", "[cli]") {
  const Fixture& f = fx();
  for (const char* name :
       {"split.json", "train_ids.txt", "val_ids.txt", "test_ids.txt",
        "history.csv", "curves_loss.svg", "curves_acc.svg", "config.json"})
    CHECK(fs::exists(f.train_out / name));
  CHECK(fs::exists(f.train_out / "model" / "model.json"));
  CHECK(fs::exists(f.train_out / "model" / "model.bin"));

  std::ifstream hist(f.train_out / "history.csv");
  std::string line;
  REQUIRE(std::getline(hist, line));
  CHECK(line == "epoch,train_loss,train_acc,val_loss,val_acc");
  int rows = 0;
  while (std::getline(hist, line)) ++rows;
  CHECK(rows == 1);  // one epoch

  nlohmann::json echo;
  std::ifstream(f.train_out / "config.json") >> echo;
  CHECK(echo["train"]["epochs"] == 1);
  CHECK(echo["network"]["input_side"] == 16);
  CHECK(echo["split"]["seed"] == 5);

  nlohmann::json split_j;
  std::ifstream(f.train_out / "split.json") >> split_j;
  CHECK(split_j["format"] == "colearn-split-v1");

  const auto train_ids = read_id_list((f.train_out / "train_ids.txt").string());
  const auto val_ids = read_id_list((f.train_out / "val_ids.txt").string());
  const auto test_ids = read_id_list((f.train_out / "test_ids.txt").string());
  std::vector<std::string> all = train_ids;
  all.insert(all.end(), val_ids.begin(), val_ids.end());
  all.insert(all.end(), test_ids.begin(), test_ids.end());
  std::sort(all.begin(), all.end());
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  CHECK(all.size() == 8);
  CHECK(test_ids.size() == 2);
}

TEST_CASE("training is repeatable and the seed flag overrides the config", "[cli]") {
  const Fixture& f = fx();
  const fs::path rep = work_root() / "train8_rep";
  const fs::path other = work_root() / "train8_seed6";
  REQUIRE(run_cli("train-cnn --config " + f.cfg.string() + " --data " +
                  f.pp.string() + " --out " + rep.string()) == 0);
  CHECK(slurp(rep / "model" / "model.bin") ==
        slurp(f.train_out / "model" / "model.bin"));
  CHECK(slurp(rep / "history.csv") == slurp(f.train_out / "history.csv"));

  REQUIRE(run_cli("train-cnn --config " + f.cfg.string() + " --data " +
                  f.pp.string() + " --seed 6 --out " + other.string()) == 0);
  CHECK(slurp(other / "model" / "model.bin") !=
        slurp(f.train_out / "model" / "model.bin"));
  nlohmann::json echo;
  std::ifstream(other / "config.json") >> echo;
  CHECK(echo["train"]["seed"] == 6);
  CHECK(echo["split"]["seed"] == 6);
}

TEST_CASE("exploding learning rate aborts with the numeric exit code", "[cli]") {
  const Fixture& f = fx();
  const fs::path cfg = work_root() / "explode_cfg.json";
  write_text(cfg, R"({
  "preprocess": {"side": 16},
  "network": {"input_side": 16, "stage_channels": [2, 3, 4, 5]},
  "train": {"epochs": 2, "batch_size": 2, "learning_rate": 1e30, "seed": 5},
  "split": {"seed": 5}
})");
  std::string out;
  CHECK(run_cli("train-cnn --config " + cfg.string() + " --data " +
                f.pp.string() + " --out " + (work_root() / "explode").string(),
                &out) == 3);
  CHECK_THAT(out, ContainsSubstring("numeric error"));
}

TEST_CASE("predict-cnn exports probabilities for the requested ids", "[cli]") {
  const Fixture& f = fx();
  const fs::path out = work_root() / "pred8";
  REQUIRE(run_cli("predict-cnn --data " + f.pp.string() + " --model " +
                  (f.train_out / "model").string() + " --ids " +
                  (f.train_out / "test_ids.txt").string() +
                  " --batch-size 3 --out " + out.string()) == 0);
  const auto preds = read_predictions_csv((out / "predictions.csv").string());
  const auto test_ids = read_id_list((f.train_out / "test_ids.txt").string());
  REQUIRE(preds.size() == test_ids.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].subject_id == test_ids[i]);
    CHECK(preds[i].prob_benign >= 0.0);
    CHECK(preds[i].prob_malignant >= 0.0);
    CHECK(std::abs(preds[i].prob_benign + preds[i].prob_malignant - 1.0) < 1e-6);
  }
}

TEST_CASE("attention-export writes the gate volume and slice images", "[cli]") {
  const Fixture& f = fx();
  const auto test_ids = read_id_list((f.train_out / "test_ids.txt").string());
  const fs::path out = work_root() / "att";
  REQUIRE(run_cli("attention-export --data " + f.pp.string() + " --model " +
                  (f.train_out / "model").string() + " --subject " +
                  test_ids[0] + " --out " + out.string()) == 0);
  const Volume att = read_volume(out / "attention.mvol.json");
  CHECK(att.shape == std::array<int64_t, 3>{16, 16, 16});
  for (float v : att.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  for (int z = 0; z < 16; ++z) {
    char name[40];
    std::snprintf(name, sizeof name, "attention_z%03d.pgm", z);
    CHECK(fs::exists(out / name));
  }
  std::string err;
  CHECK(run_cli("attention-export --data " + f.pp.string() + " --model " +
                (f.train_out / "model").string() +
                " --subject NOPE --out " + (work_root() / "att2").string(),
                &err) == 2);
  CHECK_THAT(err, ContainsSubstring("NOPE"));
}

TEST_CASE("evaluate reports per-method metrics and honors id subsets", "[cli]") {
  const fs::path dir = work_root() / "eval";
  fs::create_directories(dir);
  write_text(dir / "labels.csv", "subject_id,label\na,0\nb,0\nc,1\nd,1\n");
  write_text(dir / "good.csv", "subject_id,score\na,0.1\nb,0.2\nc,0.8\nd,0.9\n");
  write_text(dir / "bad.csv", "subject_id,score\na,0.9\nb,0.8\nc,0.2\nd,0.1\n");

  const fs::path out = dir / "report_all";
  REQUIRE(run_cli("evaluate --scores good=" + (dir / "good.csv").string() +
                  " --scores bad=" + (dir / "bad.csv").string() + " --labels " +
                  (dir / "labels.csv").string() + " --out " + out.string()) == 0);
  nlohmann::json rep;
  std::ifstream(out / "report.json") >> rep;
  REQUIRE(rep["methods"].size() == 2);
  CHECK(rep["methods"][0]["name"] == "good");
  CHECK(rep["methods"][0]["auc"] == 1.0);
  CHECK(rep["methods"][0]["n"] == 4);
  CHECK(rep["methods"][1]["name"] == "bad");
  CHECK(rep["methods"][1]["auc"] == 0.0);
  for (const char* name : {"metrics_good.json", "metrics_bad.json",
                           "roc_good.csv", "roc_bad.csv", "roc_overlay.svg"})
    CHECK(fs::exists(out / name));

  write_text(dir / "ids.txt", "a\nc\n");
  const fs::path out2 = dir / "report_subset";
  REQUIRE(run_cli("evaluate --scores good=" + (dir / "good.csv").string() +
                  " --labels " + (dir / "labels.csv").string() + " --ids " +
                  (dir / "ids.txt").string() + " --out " + out2.string()) == 0);
  nlohmann::json rep2;
  std::ifstream(out2 / "report.json") >> rep2;
  CHECK(rep2["methods"][0]["n"] == 2);
  CHECK(rep2["methods"][0]["skipped"] == 2);

  std::string err;
  CHECK(run_cli("evaluate --scores x=" + (dir / "good.csv").string() +
                " --scores x=" + (dir / "bad.csv").string() + " --labels " +
                (dir / "labels.csv").string() + " --out " +
                (dir / "dup").string(), &err) == 2);
  CHECK_THAT(err, ContainsSubstring("duplicate method name"));

  write_text(dir / "short.csv", "subject_id,score\na,0.1\n");
  CHECK(run_cli("evaluate --scores short=" + (dir / "short.csv").string() +
                " --labels " + (dir / "labels.csv").string() + " --ids " +
                (dir / "ids.txt").string() + " --out " +
                (dir / "short_out").string(), &err) == 2);
  CHECK_THAT(err, ContainsSubstring("scored 1 of the 2"));
}

TEST_CASE("train-fusion fits on the training folds and scores everyone", "[cli]") {
  const Fixture& f = fx();
  const fs::path out = work_root() / "fusion8";
  REQUIRE(run_cli("train-fusion --config " + f.cfg.string() + " --data " +
                  f.pp.string() + " --out " + out.string()) == 0);
  for (const char* name : {"gbdt.json", "scores.csv", "importance.csv",
                           "importance.svg", "split.json", "config.json"})
    CHECK(fs::exists(out / name));
  const auto scores = read_scores_csv((out / "scores.csv").string());
  CHECK(scores.size() == 8);  // every subject is scored
  for (const auto& [id, s] : scores) {
    (void)id;
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }

  // joined with image features from the trained network
  const fs::path pred = work_root() / "pred_all";
  REQUIRE(run_cli("predict-cnn --data " + f.pp.string() + " --model " +
                  (f.train_out / "model").string() + " --out " +
                  pred.string()) == 0);
  const fs::path out2 = work_root() / "fusion8_img";
  REQUIRE(run_cli("train-fusion --config " + f.cfg.string() + " --data " +
                  f.pp.string() + " --image-features " +
                  (pred / "predictions.csv").string() + " --out " +
                  out2.string()) == 0);
  const auto imp = slurp(out2 / "importance.csv");
  const std::string imp_text(imp.begin(), imp.end());
  CHECK_THAT(imp_text, ContainsSubstring("image_"));
}

TEST_CASE("crossval audits a leakage-free protocol", "[cli]") {
  const Fixture& f = fx();
  const fs::path raw16 = work_root() / "raw16";
  const fs::path pp16 = work_root() / "pp16";
  const fs::path out = work_root() / "cv16";
  PhantomConfig pc;
  // seed picked so every fold and the test set see both classes, which the
  // per-fold AUCs need
  pc.n_subjects = 16;
  pc.side = 16;
  pc.class_balance = 0.5;
  pc.nodule_radius_min = 2.0;
  pc.nodule_radius_max = 3.0;
  pc.seed = 11;
  generate_phantom_dataset(pc, raw16.string());
  REQUIRE(run_cli("preprocess --config " + f.cfg.string() + " --data " +
                  raw16.string() + " --out " + pp16.string()) == 0);
  REQUIRE(run_cli("crossval --config " + f.cfg.string() + " --data " +
                  pp16.string() + " --out " + out.string()) == 0);

  nlohmann::json audit;
  std::ifstream(out / "audit.json") >> audit;
  CHECK(audit["format"] == "colearn-crossval-audit-v1");
  CHECK(audit["n_subjects"] == 16);
  CHECK(audit["test_count"] == 3);
  CHECK(audit["fold_sizes"] == std::vector<int64_t>({4, 3, 3, 3}));
  CHECK(audit["partition_ok"] == true);
  REQUIRE(audit["per_fold"].size() == 4);
  for (const auto& fa : audit["per_fold"]) {
    CHECK(fa["train_test_overlap"] == 0);
    CHECK(fa["val_test_overlap"] == 0);
    CHECK(fa["train_val_overlap"] == 0);
    CHECK(int(fa["train_count"]) + int(fa["val_count"]) == 13);
  }

  nlohmann::json metrics;
  std::ifstream(out / "crossval_metrics.json") >> metrics;
  REQUIRE(metrics["per_fold"].size() == 4);
  for (const auto& fm : metrics["per_fold"]) {
    const double v = fm["val_auc"], t = fm["test_auc"];
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(t >= 0.0);
    CHECK(t <= 1.0);
  }
  CHECK(std::isfinite(double(metrics["mean_val_auc"])));
  CHECK(std::isfinite(double(metrics["mean_test_auc"])));
  for (int i = 0; i < 4; ++i) {
    const fs::path fd = out / ("fold" + std::to_string(i));
    CHECK(fs::exists(fd / "model" / "model.bin"));
    CHECK(fs::exists(fd / "history.csv"));
    CHECK(fs::exists(fd / "predictions_val.csv"));
    CHECK(fs::exists(fd / "predictions_test.csv"));
  }
}
