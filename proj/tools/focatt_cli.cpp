// Command-line entry point: dataset generation, mosaics, encoder fine-tuning,
// MIL training, evaluation, ablation, heat maps and manifest replay.
//
// Exit codes: 0 success, 2 usage/config/IO, 3 degenerate data, 4 missing provenance.

#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "focatt/bagprep.hpp"
#include "focatt/checkpoint.hpp"
#include "focatt/error.hpp"
#include "focatt/heatmap.hpp"
#include "focatt/hencoder.hpp"
#include "focatt/model.hpp"
#include "focatt/synthgen.hpp"
#include "focatt/trainer.hpp"

#ifndef FOCATT_VERSION
#define FOCATT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace focatt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDegenerate = 3;
constexpr int kExitProvenance = 4;

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Options bound to variables; after parsing, every value (given or default)
// can be emitted again as an argument list for exact replay.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  CLI::Option* path(const std::string& name, std::string& var, const std::string& desc) {
    entries_.push_back({name, Kind::text, [&var] { return json(var); }, [&var] { return var; }});
    return app_->add_option(name, var, desc);
  }
  CLI::Option* text(const std::string& name, std::string& var, const std::string& desc) {
    return path(name, var, desc)->capture_default_str();
  }
  CLI::Option* real(const std::string& name, double& var, const std::string& desc) {
    entries_.push_back({name, Kind::value, [&var] { return json(var); }, [&var] { return format_real(var); }});
    return app_->add_option(name, var, desc)->capture_default_str();
  }
  template <typename Int>
  CLI::Option* integer(const std::string& name, Int& var, const std::string& desc) {
    entries_.push_back({name, Kind::value, [&var] { return json(var); }, [&var] { return std::to_string(var); }});
    return app_->add_option(name, var, desc)->capture_default_str();
  }
  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    entries_.push_back({name, Kind::flag, [&var] { return json(var); }, [&var] { return std::string(var ? "1" : ""); }});
    return app_->add_flag(name, var, desc);
  }

  // Empty optional strings and unset flags are left out.
  std::vector<std::string> argv() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      const auto v = e.text();
      if (v.empty() && e.kind != Kind::value) continue;
      out.push_back(e.name);
      if (e.kind != Kind::flag) out.push_back(v);
    }
    return out;
  }

  json config() const {
    json j = json::object();
    for (const auto& e : entries_) j[e.name.substr(2)] = e.json_value();
    return j;
  }

 private:
  enum class Kind { text, value, flag };
  struct Entry {
    std::string name;
    Kind kind;
    std::function<json()> json_value;
    std::function<std::string()> text;
  };
  CLI::App* app_;
  std::vector<Entry> entries_;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Flags> flags;
  std::string manifest;
  std::function<fs::path()> default_manifest;
  std::function<std::vector<std::string>()> inputs;
  std::function<std::vector<std::string>()> outputs;
  std::function<std::uint64_t()> seed;
  std::function<void()> run;
};

void write_manifest(const std::string& name, const Command& cmd) {
  const fs::path path = cmd.manifest.empty() ? cmd.default_manifest() : fs::path(cmd.manifest);
  json j;
  j["tool"] = "focatt";
  j["version"] = FOCATT_VERSION;
  j["command"] = name;
  j["args"] = cmd.flags->argv();
  j["config"] = cmd.flags->config();
  j["inputs"] = cmd.inputs();
  j["outputs"] = cmd.outputs();
  j["seed"] = cmd.seed();
  j["wall_clock"] = utc_now();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

fs::path sibling(const std::string& file, const std::string& suffix) { return fs::path(file + suffix); }

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc() || res.ptr != item.data() + item.size()) {
      throw ArgumentError("bad seed list entry '" + item + "'");
    }
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ArgumentError("seed list is empty");
  return seeds;
}

std::size_t infer_class_count(std::span<const Bag> bags) {
  std::int32_t top = -1;
  for (const auto& b : bags) top = std::max(top, b.label.diagnosis);
  return static_cast<std::size_t>(std::max(2, top + 1));
}

// ---- shared option groups ----

struct ModelFlags {
  std::size_t hidden = 64;
  std::size_t context_dim = 64;
  std::size_t transform_dim = 64;
  std::string pool = "mean";
  bool no_context_attention = false;
  bool no_focal = false;

  void add(Flags& f) {
    f.integer("--hidden", hidden, "hidden width of every sub-network");
    f.integer("--context-dim", context_dim, "width of the bag context vector");
    f.integer("--transform-dim", transform_dim, "width of the transformed instance fed to attention");
    f.text("--pool", pool, "context pooling over instances {sum,mean,max}")
        ->check(CLI::IsMember({"sum", "mean", "max"}));
    f.flag("--no-context-attention", no_context_attention, "drop the bag context from the attention input");
    f.flag("--no-focal", no_focal, "replace the focal exponents by ones");
  }
  ModelConfig config(std::size_t input_dim, std::size_t classes, double dropout) const {
    ModelConfig mc;
    mc.input_dim = input_dim;
    mc.class_count = classes;
    mc.hidden = hidden;
    mc.context_dim = context_dim;
    mc.transform_dim = transform_dim;
    mc.pool = pool_from_string(pool);
    mc.use_context_in_attention = !no_context_attention;
    mc.use_focal = !no_focal;
    mc.dropout = dropout;
    return mc;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  void add(Flags& f) {
    f.real("--lr", cfg.learning_rate, "SGD learning rate (reference training recipe)");
    f.real("--momentum", cfg.momentum, "SGD momentum (reference training recipe)");
    f.real("--wd", cfg.weight_decay, "weight decay (reference training recipe)");
    f.real("--clip", cfg.clip_norm, "global gradient-norm clip (reference training recipe)");
    f.real("--dropout", cfg.dropout, "dropout between hidden layers while training");
    f.integer("--epochs", cfg.epochs, "training epochs (reference training recipe)");
    f.integer("--batch", cfg.batch, "bags per optimizer step");
    f.real("--val-fraction", cfg.validation_fraction, "share of training bags held out for validation");
  }
};

// ---- commands ----

void add_synth(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["synth"];
  cmd.app = root.add_subcommand("synth", "generate a planted dataset from a key=value spec file");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  auto s = std::make_shared<std::pair<std::string, std::string>>();
  cmd.flags->path("--spec", s->first, "spec file (key = value lines)")->required()->check(CLI::ExistingFile);
  cmd.flags->path("--out", s->second, "output directory")->required();
  cmd.default_manifest = [s] { return fs::path(s->second) / "manifest.json"; };
  cmd.inputs = [s] { return std::vector<std::string>{s->first}; };
  cmd.outputs = [s] { return std::vector<std::string>{s->second}; };
  auto spec = std::make_shared<SynthSpec>();
  cmd.seed = [s, spec] {
    *spec = SynthSpec::read(s->first);
    return spec->seed;
  };
  cmd.run = [s, spec] {
    const fs::path out = s->second;
    fs::create_directories(out);
    {
      std::ofstream f(out / "spec.txt", std::ios::binary);
      f << spec->serialize();
      if (!f) throw IoError("cannot write " + (out / "spec.txt").string());
    }
    const auto data = generate_bags(*spec);
    write_bags(out, data);
    if (spec->slides_per_diagnosis > 0) write_slides(out / "slides", generate_slides(*spec), data.table);
    if (spec->patches_per_diagnosis > 0) {
      write_labeled_patches(out / "patches", generate_labeled_patches(*spec), data.table);
    }
    std::ostringstream summary;
    summary << "bags\t" << data.train.size() + data.test.size() << "\ntrain\t" << data.train.size() << "\ntest\t"
            << data.test.size() << "\nclasses\t" << data.table.diagnosis_count() << "\nsites\t"
            << data.table.site_count() << "\ncontext_coupled\t" << (spec->context_coupled ? "true" : "false")
            << "\noracle_accuracy\t" << format_real(data.oracle_accuracy) << '\n';
    std::ofstream f(out / "summary.txt", std::ios::binary);
    f << summary.str();
    if (!f) throw IoError("cannot write " + (out / "summary.txt").string());
    std::cout << summary.str();
  };
}

void add_mosaic(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["mosaic"];
  cmd.app = root.add_subcommand("mosaic", "select a representative mosaic of a slide and write it as a bag");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string slide_dir, out, encoder, diagnosis, labels, hierarchy;
    MosaicOptions mosaic;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--slide-dir", o->slide_dir, "directory of r{row}_c{col}.ppm/.png tiles")->required()->check(CLI::ExistingDirectory);
  f.path("--out", o->out, "output bag file")->required();
  f.integer("--k", o->mosaic.k, "clusters per slide");
  f.real("--fraction", o->mosaic.fraction, "share of each cluster sampled (reference bag preparation, e.g. 10%)");
  f.integer("--seed", o->mosaic.seed, "clustering and sampling seed");
  f.real("--tissue-threshold", o->mosaic.tissue_threshold, "minimum tissue-pixel ratio of a kept patch");
  f.integer("--kmeans-restarts", o->mosaic.kmeans.restarts, "seeded k-means restarts, lowest inertia kept");
  f.integer("--kmeans-max-iter", o->mosaic.kmeans.max_iter, "Lloyd iterations per restart");
  f.text("--encoder", o->encoder, "encoder checkpoint; without it instances are 9-value colour summaries");
  f.text("--diagnosis", o->diagnosis, "diagnosis name of the slide (needs --hierarchy)");
  f.text("--labels", o->labels, "labels.tsv mapping slide id to diagnosis (needs --hierarchy)");
  f.text("--hierarchy", o->hierarchy, "diagnosis<TAB>site table");
  cmd.default_manifest = [o] { return sibling(o->out, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->slide_dir};
    for (const auto* p : {&o->encoder, &o->labels, &o->hierarchy}) {
      if (!p->empty()) in.push_back(*p);
    }
    return in;
  };
  cmd.outputs = [o] { return std::vector<std::string>{o->out}; };
  cmd.seed = [o] { return o->mosaic.seed; };
  cmd.run = [o] {
    std::optional<HierEncoder> enc;
    if (!o->encoder.empty()) enc = encoder_from_checkpoint(read_checkpoint(o->encoder));
    const auto patches = read_slide_dir(o->slide_dir, enc ? enc->patch_side() : 0);
    if (patches.empty()) throw IoError("no r{row}_c{col} tiles in " + o->slide_dir);

    HierarchicalLabel label;
    std::string diagnosis = o->diagnosis;
    if (!o->labels.empty()) {
      std::ifstream in(o->labels, std::ios::binary);
      if (!in) throw IoError("cannot read " + o->labels);
      std::string line;
      while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab != std::string::npos && line.substr(0, tab) == patches.front().slide_id) {
          diagnosis = line.substr(tab + 1);
        }
      }
      if (diagnosis.empty()) throw ArgumentError("slide '" + patches.front().slide_id + "' is not in " + o->labels);
    }
    if (!diagnosis.empty()) {
      if (o->hierarchy.empty()) throw ArgumentError("a diagnosis needs --hierarchy");
      label = HierarchyTable::read(o->hierarchy).label_for(diagnosis);
    }

    const auto mosaic = select_mosaic(patches, o->mosaic);
    const PatchEncoder encoder = enc ? patch_encoder(*enc) : PatchEncoder(color_summary);
    const auto bag = build_bag(mosaic, encoder, label);
    ensure_parent(o->out);
    write_bag(o->out, bag);
    std::cout << "slide\t" << mosaic.slide_id << "\npatches\t" << patches.size() << "\nmosaic\t"
              << mosaic.selected.size() << "\nk\t" << mosaic.k << "\n";
    std::vector<std::size_t> taken(mosaic.k, 0);
    for (auto c : mosaic.selected_cluster) ++taken[c];
    for (std::size_t c = 0; c < mosaic.k; ++c) {
      std::cout << "cluster " << c << "\t" << taken[c] << "/" << mosaic.cluster_sizes[c] << "\n";
    }
  };
}

void add_finetune(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["finetune"];
  cmd.app = root.add_subcommand("finetune", "fine-tune the patch encoder with site and diagnosis labels");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string patches, hierarchy, out, history, init;
    FineTuneConfig ft;
    EncoderConfig enc;
    std::size_t patch_side = 32;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--patches", o->patches, "directory with labels.tsv (file<TAB>diagnosis) and patch images")
      ->required()
      ->check(CLI::ExistingDirectory);
  f.path("--hierarchy", o->hierarchy, "diagnosis<TAB>site table")->required()->check(CLI::ExistingFile);
  f.path("--out", o->out, "output encoder checkpoint")->required();
  f.text("--history", o->history, "optional CSV of per-epoch loss and accuracy");
  f.text("--init", o->init, "start from this encoder checkpoint instead of a fresh one");
  f.real("--lr", o->ft.learning_rate, "Adam learning rate (reference recipe uses 1e-5 for a pretrained trunk)");
  f.integer("--epochs", o->ft.epochs, "fine-tuning epochs (reference fine-tuning recipe)");
  f.integer("--batch", o->ft.batch, "patches per optimizer step");
  f.real("--wd", o->ft.weight_decay, "weight decay");
  f.integer("--seed", o->ft.seed, "initialisation, shuffling and dropout seed");
  f.real("--site-weight", o->ft.weights.site, "weight of the anatomic-site cross-entropy (reference: equal)");
  f.real("--diagnosis-weight", o->ft.weights.diagnosis, "weight of the diagnosis cross-entropy (reference: equal)");
  f.integer("--patch-side", o->patch_side, "encoder input side; patches are resized to it");
  f.integer("--hidden", o->enc.hidden, "trunk hidden width");
  f.integer("--embed-dim", o->enc.embed_dim, "embedding width");
  f.integer("--head-hidden", o->enc.head_hidden, "hidden width of both heads, 0 for linear heads");
  f.real("--dropout", o->enc.dropout, "dropout between hidden layers while training");
  cmd.default_manifest = [o] { return sibling(o->out, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->patches, o->hierarchy};
    if (!o->init.empty()) in.push_back(o->init);
    return in;
  };
  cmd.outputs = [o] {
    std::vector<std::string> out{o->out};
    if (!o->history.empty()) out.push_back(o->history);
    return out;
  };
  cmd.seed = [o] { return o->ft.seed; };
  cmd.run = [o] {
    const auto table = HierarchyTable::read(o->hierarchy);
    HierEncoder enc;
    if (!o->init.empty()) {
      enc = encoder_from_checkpoint(read_checkpoint(o->init));
      if (!(enc.table == table)) throw ArgumentError("--init encoder was trained on a different hierarchy");
    } else {
      o->enc.input_dim = o->patch_side * o->patch_side * 3;
      enc = HierEncoder::make(table, o->enc, o->ft.seed);
    }
    enc.set_dropout_rate(o->enc.dropout);
    const std::size_t side = enc.patch_side();
    std::vector<LabeledInput> data;
    for (const auto& lp : read_labeled_patches(o->patches, table)) {
      data.push_back({patch_to_input(resize_patch(lp.patch, side)), lp.label});
    }
    const auto result = fine_tune(enc, data, o->ft);
    ensure_parent(o->out);
    write_checkpoint(o->out, encoder_checkpoint(enc));
    if (!o->history.empty()) {
      std::vector<HistoryRow> rows;
      for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
        rows.push_back({e + 1, "train", result.loss_history[e], result.accuracy_history[e]});
      }
      ensure_parent(o->history);
      write_history_csv(o->history, rows);
    }
    std::cout << "patches\t" << data.size() << "\nfinal_loss\t" << format_real(result.loss_history.back())
              << "\nfinal_accuracy\t" << format_real(result.accuracy_history.back()) << "\n";
  };
}

void add_train(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["train"];
  cmd.app = root.add_subcommand("train", "train the attention-with-focus MIL model on a bag directory");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string train, validation, out, last, history, hierarchy;
    std::size_t classes = 0;
    std::uint64_t seed = 0;
    ModelFlags model;
    TrainFlags training;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--train", o->train, "directory of training .bag files")->required()->check(CLI::ExistingDirectory);
  f.text("--validation", o->validation, "validation bag directory; default holds out --val-fraction of --train");
  f.path("--out", o->out, "checkpoint of the best validation epoch")->required();
  f.text("--last", o->last, "optional checkpoint of the final epoch");
  f.text("--history", o->history, "optional CSV epoch,split,loss,accuracy");
  f.text("--hierarchy", o->hierarchy, "diagnosis<TAB>site table; fixes the class count");
  f.integer("--classes", o->classes, "class count when no hierarchy is given; 0 infers it from the labels");
  f.integer("--seed", o->seed, "initialisation, split, shuffling and dropout seed");
  o->model.add(f);
  o->training.add(f);
  cmd.default_manifest = [o] { return sibling(o->out, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->train};
    if (!o->validation.empty()) in.push_back(o->validation);
    if (!o->hierarchy.empty()) in.push_back(o->hierarchy);
    return in;
  };
  cmd.outputs = [o] {
    std::vector<std::string> out{o->out};
    if (!o->last.empty()) out.push_back(o->last);
    if (!o->history.empty()) out.push_back(o->history);
    return out;
  };
  cmd.seed = [o] { return o->seed; };
  cmd.run = [o] {
    auto cfg = o->training.cfg;
    cfg.seed = o->seed;
    cfg.validate();
    const auto bags = read_bag_dir(o->train);
    if (bags.empty()) throw ArgumentError("no .bag files in " + o->train);
    BagSplit split;
    if (o->validation.empty()) {
      split = split_train_validation(bags, cfg.validation_fraction, cfg.seed);
    } else {
      split.train = bags;
      split.validation = read_bag_dir(o->validation);
    }
    std::size_t classes = o->classes;
    if (!o->hierarchy.empty()) classes = HierarchyTable::read(o->hierarchy).diagnosis_count();
    if (classes == 0) classes = infer_class_count(bags);
    const auto model = FocAttModel::make(o->model.config(bags.front().dim(), classes, cfg.dropout), cfg.seed);
    const auto result = train_mil(model, split.train, split.validation, cfg);
    ensure_parent(o->out);
    write_checkpoint(o->out, model_checkpoint(result.best));
    if (!o->last.empty()) {
      ensure_parent(o->last);
      write_checkpoint(o->last, model_checkpoint(result.last));
    }
    if (!o->history.empty()) {
      ensure_parent(o->history);
      write_history_csv(o->history, result.history);
    }
    std::cout << "train_bags\t" << split.train.size() << "\nvalidation_bags\t" << split.validation.size()
              << "\nbest_epoch\t" << result.best_epoch << "\nbest_validation_accuracy\t"
              << format_real(result.best_validation_accuracy) << "\n";
  };
}

void add_eval(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["eval"];
  cmd.app = root.add_subcommand("eval", "score a trained model on a bag directory");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string model, bags, report, predictions, hierarchy, vertical;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--model", o->model, "model checkpoint")->required()->check(CLI::ExistingFile);
  f.path("--bags", o->bags, "directory of .bag files")->required()->check(CLI::ExistingDirectory);
  f.path("--report", o->report, "output JSON report")->required();
  f.text("--predictions", o->predictions, "optional CSV slide_id,label,y0..y{c-1}");
  f.text("--hierarchy", o->hierarchy, "diagnosis<TAB>site table; enables the vertical table");
  f.text("--vertical", o->vertical, "optional plain-text vertical table (needs --hierarchy)");
  cmd.default_manifest = [o] { return sibling(o->report, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->model, o->bags};
    if (!o->hierarchy.empty()) in.push_back(o->hierarchy);
    return in;
  };
  cmd.outputs = [o] {
    std::vector<std::string> out{o->report};
    for (const auto* p : {&o->predictions, &o->vertical}) {
      if (!p->empty()) out.push_back(*p);
    }
    return out;
  };
  cmd.seed = [] { return std::uint64_t{0}; };
  cmd.run = [o] {
    const auto model = model_from_checkpoint(read_checkpoint(o->model));
    const auto bags = read_bag_dir(o->bags);
    const auto report = evaluate(model, bags);
    json j;
    j["bags"] = bags.size();
    j["accuracy"] = report.accuracy;
    j["loss"] = report.loss;
    json per = json::object();
    for (const auto& [c, acc] : report.per_class_accuracy) per[std::to_string(c)] = acc;
    j["per_class_accuracy"] = per;
    j["auc"] = report.auc ? json(*report.auc) : json(nullptr);
    if (!o->hierarchy.empty()) {
      const auto table = HierarchyTable::read(o->hierarchy);
      const auto grouping = site_grouping(table);
      const auto vertical = vertical_accuracy(report.predictions, bags, grouping);
      json v = json::object();
      for (const auto& [group, per_diag] : vertical) {
        for (const auto& [d, acc] : per_diag) v[group][table.diagnoses()[d]] = acc;
      }
      j["vertical"] = v;
      if (!o->vertical.empty()) {
        ensure_parent(o->vertical);
        std::ofstream out(o->vertical, std::ios::binary);
        out << format_vertical_table(vertical, table);
        if (!out) throw IoError("cannot write " + o->vertical);
      }
    } else if (!o->vertical.empty()) {
      throw ArgumentError("--vertical needs --hierarchy");
    }
    ensure_parent(o->report);
    {
      std::ofstream out(o->report, std::ios::binary);
      out << j.dump(2) << '\n';
      if (!out) throw IoError("cannot write " + o->report);
    }
    if (!o->predictions.empty()) {
      ensure_parent(o->predictions);
      std::ofstream out(o->predictions, std::ios::binary);
      out << "slide_id,label";
      for (std::size_t c = 0; c < model.class_count(); ++c) out << ",y" << c;
      out << '\n';
      for (std::size_t b = 0; b < bags.size(); ++b) {
        out << bags[b].slide_id << ',' << bags[b].label.diagnosis;
        for (double v : report.predictions[b]) out << ',' << format_real(v);
        out << '\n';
      }
      if (!out) throw IoError("cannot write " + o->predictions);
    }
    std::cout << "bags\t" << bags.size() << "\naccuracy\t" << format_real(report.accuracy) << "\n";
    if (report.auc) std::cout << "auc\t" << format_real(*report.auc) << "\n";
  };
}

void add_ablate(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["ablate"];
  cmd.app = root.add_subcommand("ablate", "train full, no-context-attention and no-focal-and-no-context variants");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string train, test, out, seeds = "0,1,2,3,4", hierarchy;
    std::size_t classes = 0;
    ModelFlags model;
    TrainFlags training;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--train", o->train, "directory of training .bag files")->required()->check(CLI::ExistingDirectory);
  f.path("--test", o->test, "directory of held-out .bag files")->required()->check(CLI::ExistingDirectory);
  f.path("--out", o->out, "output report (tab-separated, with reference footer)")->required();
  f.text("--seeds", o->seeds, "comma-separated seeds shared by every variant");
  f.text("--hierarchy", o->hierarchy, "diagnosis<TAB>site table; fixes the class count");
  f.integer("--classes", o->classes, "class count when no hierarchy is given; 0 infers it from the labels");
  o->model.add(f);
  o->training.add(f);
  cmd.default_manifest = [o] { return sibling(o->out, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->train, o->test};
    if (!o->hierarchy.empty()) in.push_back(o->hierarchy);
    return in;
  };
  cmd.outputs = [o] { return std::vector<std::string>{o->out}; };
  cmd.seed = [o] { return parse_seed_list(o->seeds).front(); };
  cmd.run = [o] {
    o->training.cfg.validate();
    const auto seeds = parse_seed_list(o->seeds);
    const auto train = read_bag_dir(o->train);
    const auto test = read_bag_dir(o->test);
    if (train.empty() || test.empty()) throw ArgumentError("ablation needs non-empty train and test directories");
    std::size_t classes = o->classes;
    if (!o->hierarchy.empty()) classes = HierarchyTable::read(o->hierarchy).diagnosis_count();
    if (classes == 0) classes = infer_class_count(train);
    const auto mc = o->model.config(train.front().dim(), classes, o->training.cfg.dropout);
    const auto variants = standard_ablation_variants();
    const auto report = ablation_suite(train, test, mc, o->training.cfg, seeds, variants);
    const auto text = format_ablation_report(report);
    ensure_parent(o->out);
    std::ofstream out(o->out, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + o->out);
    std::cout << text;
  };
}

void add_heatmap(CLI::App& root, std::map<std::string, Command>& cmds) {
  auto& cmd = cmds["heatmap"];
  cmd.app = root.add_subcommand("heatmap", "render the attention of a bag onto its slide grid");
  cmd.flags = std::make_unique<Flags>(cmd.app);
  struct Opts {
    std::string model, bag, slide_dir, out, csv;
    std::size_t cell = 8;
  };
  auto o = std::make_shared<Opts>();
  auto& f = *cmd.flags;
  f.path("--model", o->model, "model checkpoint")->required()->check(CLI::ExistingFile);
  f.path("--bag", o->bag, "bag file with grid coordinates")->required()->check(CLI::ExistingFile);
  f.text("--slide-dir", o->slide_dir, "slide tiles; fixes the grid extent (default: extent of the bag)");
  f.path("--out", o->out, "output image, .pgm (plain) or .png")->required();
  f.text("--csv", o->csv, "attention CSV (default: --out with a .csv extension)");
  f.integer("--cell", o->cell, "pixels per grid cell");
  auto csv_path = [o] { return o->csv.empty() ? fs::path(o->out).replace_extension(".csv").string() : o->csv; };
  cmd.default_manifest = [o] { return sibling(o->out, ".manifest.json"); };
  cmd.inputs = [o] {
    std::vector<std::string> in{o->model, o->bag};
    if (!o->slide_dir.empty()) in.push_back(o->slide_dir);
    return in;
  };
  cmd.outputs = [o, csv_path] { return std::vector<std::string>{o->out, csv_path()}; };
  cmd.seed = [] { return std::uint64_t{0}; };
  cmd.run = [o, csv_path] {
    const auto model = model_from_checkpoint(read_checkpoint(o->model));
    const auto bag = read_bag(o->bag);
    if (!bag.has_provenance()) throw ProvenanceError("bag '" + bag.slide_id + "' has no grid coordinates");
    std::int32_t rows = 0, cols = 0;
    for (const auto& g : bag.coords) {
      rows = std::max(rows, g.row + 1);
      cols = std::max(cols, g.col + 1);
    }
    if (!o->slide_dir.empty()) {
      for (const auto& p : read_slide_dir(o->slide_dir, 0)) {
        rows = std::max(rows, p.grid.row + 1);
        cols = std::max(cols, p.grid.col + 1);
      }
    }
    const auto output = forward(model, bag);
    const auto img = render_heatmap(bag.coords, output.a, static_cast<std::size_t>(rows),
                                    static_cast<std::size_t>(cols), o->cell);
    ensure_parent(o->out);
    write_heatmap_image(o->out, img);
    ensure_parent(csv_path());
    write_attention_csv(csv_path(), bag.coords, output.a);
    std::cout << "instances\t" << bag.size() << "\ngrid\t" << rows << "x" << cols << "\n";
  };
}

int run_cli(std::vector<std::string> args);

int dispatch(CLI::App& root, std::map<std::string, Command>& cmds, CLI::App* replay, const std::string& replay_path) {
  if (replay->parsed()) {
    std::ifstream in(replay_path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest " + replay_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw IoError("malformed manifest " + replay_path + ": " + e.what());
    }
    if (!j.contains("command") || !j.contains("args")) throw IoError("manifest lacks command or args");
    std::vector<std::string> args{"focatt", j["command"].get<std::string>()};
    for (const auto& a : j["args"]) args.push_back(a.get<std::string>());
    return run_cli(args);
  }
  for (auto& [name, cmd] : cmds) {
    if (!cmd.app->parsed()) continue;
    write_manifest(name, cmd);
    cmd.run();
    return kExitOk;
  }
  std::cerr << root.help();
  return kExitUsage;
}

int run_cli(std::vector<std::string> args) {
  CLI::App root{"attention-with-focus multiple-instance learning for whole-slide images", "focatt"};
  root.set_version_flag("--version", std::string(FOCATT_VERSION));
  root.require_subcommand(1);
  std::map<std::string, Command> cmds;
  add_synth(root, cmds);
  add_mosaic(root, cmds);
  add_finetune(root, cmds);
  add_train(root, cmds);
  add_eval(root, cmds);
  add_ablate(root, cmds);
  add_heatmap(root, cmds);
  for (auto& [name, cmd] : cmds) {
    cmd.flags->path("--manifest", cmd.manifest, "where to write the run manifest (default next to the output)");
  }
  std::string replay_path;
  auto* replay = root.add_subcommand("replay", "re-run the command recorded in a run manifest");
  replay->add_option("manifest", replay_path, "manifest JSON written by an earlier run")->required()->check(
      CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    root.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = root.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return dispatch(root, cmds, replay, replay_path);
  } catch (const EmptySlideError& e) {
    std::cerr << "focatt: " << e.what() << '\n';
    return kExitDegenerate;
  } catch (const NumericError& e) {
    std::cerr << "focatt: " << e.what() << '\n';
    return kExitDegenerate;
  } catch (const ProvenanceError& e) {
    std::cerr << "focatt: " << e.what() << '\n';
    return kExitProvenance;
  } catch (const std::exception& e) {
    std::cerr << "focatt: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace

int main(int argc, char** argv) { return run_cli(std::vector<std::string>(argv, argv + argc)); }
