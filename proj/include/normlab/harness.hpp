// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "normlab/fixtures.hpp"
#include "normlab/probes.hpp"
#include "normlab/stats.hpp"
#include "normlab/trainer.hpp"

namespace normlab::harness {

namespace fs = std::filesystem;

// ---- settings ---------------------------------------------------------------

struct DataSettings {
  std::string path;  // empty: synthetic corpus
  CorpusFormat format = CorpusFormat::raw_bytes;
  std::size_t train_tokens = 100000;
  std::size_t val_tokens = 50000;
  std::size_t corpus_tokens = 6000000;  // synthetic corpus length
  std::uint64_t corpus_seed = 0;
};

struct Settings {
  ModelConfig model;
  TrainConfig train;
  DataSettings data;
  std::string out;       // output directory
  std::string manifest;  // empty: <out>/manifest.jsonl
  bool force = false;
  bool measure_saturation = true;  // record sigma at the end of dyt runs
  // sweep
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::size_t limit = 0;  // 0: no limit
  // probe
  std::string checkpoint;
  std::string which = "saturation,alpha-report,act-rank,weight-geom,lipschitz";
  double threshold = 2.0;
  probes::SampleSpec sample;
  std::size_t rank_batch = 16;
  std::string eps = "0.005,0.01,0.02";
  std::size_t trials = 3;
  // screen
  bool prior_only = false;
  double params = 0;
  double tokens = 0;
  std::size_t calib_steps = 500;
  std::string calib_seeds = "1337,42,7";
  // report
  std::string family;
  std::string format = "text";
  std::size_t family_size = 0;  // 0: number of comparisons in the report
  std::string ingest;           // "scale1" or "scale4": use the published per-seed table

  fs::path out_dir() const { return out.empty() ? fs::path("normlab_out") : fs::path(out); }
  fs::path manifest_path() const { return manifest.empty() ? out_dir() / "manifest.jsonl" : fs::path(manifest); }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    // accept 1e6 style as well as integers
    if (v.find_first_of("eE.") != std::string::npos) {
      const double d = std::stod(v, &pos);
      if (pos != v.size() || !(d >= 0) || d != std::floor(d)) throw std::invalid_argument(v);
      return static_cast<std::uint64_t>(d);
    }
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// One configurable setting. Config key "section.key" and CLI flag "--key"
// (underscores become dashes) address the same entry.
struct SettingDef {
  std::string section;
  std::string key;
  std::string help;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;

  std::string flag() const {
    std::string f = key;
    std::replace(f.begin(), f.end(), '_', '-');
    return "--" + f;
  }
};

inline const std::vector<SettingDef>& setting_table() {
  using detail::fmt_double;
  using detail::to_bool;
  using detail::to_double;
  using detail::to_u64;
  static const std::vector<SettingDef> table = [] {
    std::vector<SettingDef> t;
    auto sz = [&](std::string sec, std::string key, std::string help, auto member) {
      t.push_back({sec, key, help,
                   [key, member](Settings& s, const std::string& v) { member(s) = static_cast<std::size_t>(to_u64(key, v)); },
                   [member](const Settings& s) { return std::to_string(member(const_cast<Settings&>(s))); }});
    };
    auto u64 = [&](std::string sec, std::string key, std::string help, auto member) {
      t.push_back({sec, key, help, [key, member](Settings& s, const std::string& v) { member(s) = to_u64(key, v); },
                   [member](const Settings& s) { return std::to_string(member(const_cast<Settings&>(s))); }});
    };
    auto dbl = [&](std::string sec, std::string key, std::string help, auto member) {
      t.push_back({sec, key, help, [key, member](Settings& s, const std::string& v) { member(s) = to_double(key, v); },
                   [member](const Settings& s) { return fmt_double(member(const_cast<Settings&>(s))); }});
    };
    auto flag = [&](std::string sec, std::string key, std::string help, auto member) {
      t.push_back({sec, key, help, [key, member](Settings& s, const std::string& v) { member(s) = to_bool(key, v); },
                   [member](const Settings& s) { return std::string(member(const_cast<Settings&>(s)) ? "true" : "false"); }});
    };
    auto str = [&](std::string sec, std::string key, std::string help, auto member) {
      t.push_back({sec, key, help, [member](Settings& s, const std::string& v) { member(s) = v; },
                   [member](const Settings& s) { return member(const_cast<Settings&>(s)); }});
    };
    // model
    t.push_back({"model", "norm", "norm kind: layernorm | rmsnorm | dyt | hardtanh",
                 [](Settings& s, const std::string& v) { s.model.norm_kind = parse_norm_kind(v); },
                 [](const Settings& s) { return std::string(name_of(s.model.norm_kind)); }});
    t.push_back({"model", "attn", "attention kind: standard | diff_v1 | diff_sigmoid",
                 [](Settings& s, const std::string& v) { s.model.attn_kind = parse_attn_kind(v); },
                 [](const Settings& s) { return std::string(name_of(s.model.attn_kind)); }});
    t.push_back({"model", "ffn", "feed-forward kind: gelu | swiglu",
                 [](Settings& s, const std::string& v) { s.model.ffn_kind = parse_ffn_kind(v); },
                 [](const Settings& s) { return std::string(name_of(s.model.ffn_kind)); }});
    t.push_back({"model", "pos", "position encoding: learned | rope",
                 [](Settings& s, const std::string& v) { s.model.pos_kind = parse_pos_kind(v); },
                 [](const Settings& s) { return std::string(name_of(s.model.pos_kind)); }});
    sz("model", "n_layer", "transformer blocks", [](Settings& s) -> std::size_t& { return s.model.n_layer; });
    sz("model", "n_head", "query heads", [](Settings& s) -> std::size_t& { return s.model.n_head; });
    sz("model", "n_kv_head", "key/value heads (0: n_head)", [](Settings& s) -> std::size_t& { return s.model.n_kv_head; });
    sz("model", "d_model", "model width", [](Settings& s) -> std::size_t& { return s.model.d_model; });
    sz("model", "vocab_size", "vocabulary size", [](Settings& s) -> std::size_t& { return s.model.vocab_size; });
    sz("model", "block_size", "context length", [](Settings& s) -> std::size_t& { return s.model.block_size; });
    dbl("model", "alpha_init", "initial dyt alpha", [](Settings& s) -> double& { return s.model.alpha_init; });
    dbl("model", "dropout", "dropout probability", [](Settings& s) -> double& { return s.model.dropout_p; });
    flag("model", "tying", "tie input and output embeddings", [](Settings& s) -> bool& { return s.model.weight_tying; });
    dbl("model", "diff_lambda_init", "constant lambda offset for diff_v1",
        [](Settings& s) -> double& { return s.model.diff_lambda_init; });
    dbl("model", "rope_base", "rope frequency base", [](Settings& s) -> double& { return s.model.rope_base; });
    // train
    sz("train", "steps", "optimizer steps", [](Settings& s) -> std::size_t& { return s.train.max_steps; });
    sz("train", "eval_interval", "steps between evaluations", [](Settings& s) -> std::size_t& { return s.train.eval_interval; });
    sz("train", "eval_batches", "batches per evaluation", [](Settings& s) -> std::size_t& { return s.train.eval_batches; });
    dbl("train", "lr", "peak learning rate", [](Settings& s) -> double& { return s.train.lr_peak; });
    sz("train", "warmup", "warmup steps", [](Settings& s) -> std::size_t& { return s.train.warmup_steps; });
    dbl("train", "min_lr", "final learning rate (0: lr/10)", [](Settings& s) -> double& { return s.train.min_lr; });
    dbl("train", "beta1", "adam beta1", [](Settings& s) -> double& { return s.train.beta1; });
    dbl("train", "beta2", "adam beta2", [](Settings& s) -> double& { return s.train.beta2; });
    dbl("train", "adam_eps", "adam epsilon", [](Settings& s) -> double& { return s.train.eps; });
    dbl("train", "weight_decay", "decoupled weight decay", [](Settings& s) -> double& { return s.train.weight_decay; });
    dbl("train", "grad_clip", "global grad-norm clip (0: off)", [](Settings& s) -> double& { return s.train.grad_clip; });
    sz("train", "batch_size", "sequences per micro-batch", [](Settings& s) -> std::size_t& { return s.train.batch_size; });
    sz("train", "grad_accum", "micro-batches per step", [](Settings& s) -> std::size_t& { return s.train.grad_accum; });
    u64("train", "seed", "run seed", [](Settings& s) -> std::uint64_t& { return s.train.seed; });
    u64("train", "eval_seed", "seed of the shared eval batches", [](Settings& s) -> std::uint64_t& { return s.train.eval_seed; });
    sz("train", "checkpoint_interval", "steps between checkpoints (0: final only)",
       [](Settings& s) -> std::size_t& { return s.train.checkpoint_interval; });
    // data
    str("data", "data", "corpus file (empty: synthetic text)", [](Settings& s) -> std::string& { return s.data.path; });
    t.push_back({"data", "data_format", "corpus format: bytes | tokens",
                 [](Settings& s, const std::string& v) {
                   if (v == "bytes") s.data.format = CorpusFormat::raw_bytes;
                   else if (v == "tokens") s.data.format = CorpusFormat::u16_tokens;
                   else throw ConfigError("data_format: expected bytes or tokens, got '" + v + "'");
                 },
                 [](const Settings& s) { return std::string(s.data.format == CorpusFormat::raw_bytes ? "bytes" : "tokens"); }});
    sz("data", "budget", "training tokens", [](Settings& s) -> std::size_t& { return s.data.train_tokens; });
    sz("data", "val_tokens", "validation tokens", [](Settings& s) -> std::size_t& { return s.data.val_tokens; });
    sz("data", "corpus_tokens", "synthetic corpus length", [](Settings& s) -> std::size_t& { return s.data.corpus_tokens; });
    u64("data", "corpus_seed", "synthetic corpus seed", [](Settings& s) -> std::uint64_t& { return s.data.corpus_seed; });
    // output
    str("output", "out", "output directory (default $NORMLAB_OUT or normlab_out)", [](Settings& s) -> std::string& { return s.out; });
    str("output", "manifest", "manifest path (default <out>/manifest.jsonl)", [](Settings& s) -> std::string& { return s.manifest; });
    flag("output", "force", "append even if the cell id is already in the manifest", [](Settings& s) -> bool& { return s.force; });
    flag("output", "measure_saturation", "record sigma at the end of dyt runs",
         [](Settings& s) -> bool& { return s.measure_saturation; });
    // sweep
    t.push_back({"sweep", "budgets", "comma list of training-token budgets",
                 [](Settings& s, const std::string& v) {
                   s.budgets.clear();
                   for (const auto& x : detail::split_list(v)) s.budgets.push_back(static_cast<std::size_t>(to_u64("budgets", x)));
                 },
                 [](const Settings& s) {
                   std::string o;
                   for (auto b : s.budgets) o += (o.empty() ? "" : ",") + std::to_string(b);
                   return o;
                 }});
    t.push_back({"sweep", "seeds", "comma list of seeds",
                 [](Settings& s, const std::string& v) {
                   s.seeds.clear();
                   for (const auto& x : detail::split_list(v)) s.seeds.push_back(to_u64("seeds", x));
                 },
                 [](const Settings& s) {
                   std::string o;
                   for (auto b : s.seeds) o += (o.empty() ? "" : ",") + std::to_string(b);
                   return o;
                 }});
    sz("sweep", "workers", "worker processes (0: run in-process)", [](Settings& s) -> std::size_t& { return s.workers; });
    sz("sweep", "limit", "run at most this many cells (0: all)", [](Settings& s) -> std::size_t& { return s.limit; });
    // probe
    str("probe", "checkpoint", "checkpoint file", [](Settings& s) -> std::string& { return s.checkpoint; });
    str("probe", "which", "probes: saturation,alpha-report,act-rank,weight-geom,lipschitz",
        [](Settings& s) -> std::string& { return s.which; });
    dbl("probe", "threshold", "|alpha x| cutoff for saturation", [](Settings& s) -> double& { return s.threshold; });
    sz("probe", "batches", "forward passes for saturation", [](Settings& s) -> std::size_t& { return s.sample.n_batches; });
    sz("probe", "seq", "sequence length (clamped to block_size)", [](Settings& s) -> std::size_t& { return s.sample.seq; });
    sz("probe", "probe_batch", "sequences per saturation pass", [](Settings& s) -> std::size_t& { return s.sample.batch_size; });
    u64("probe", "probe_seed", "sample seed", [](Settings& s) -> std::uint64_t& { return s.sample.seed; });
    sz("probe", "rank_batch", "sequences for activation rank", [](Settings& s) -> std::size_t& { return s.rank_batch; });
    str("probe", "eps", "comma list of lipschitz perturbation scales", [](Settings& s) -> std::string& { return s.eps; });
    sz("probe", "trials", "lipschitz trials per eps", [](Settings& s) -> std::size_t& { return s.trials; });
    // screen
    flag("screen", "prior_only", "use the T/P prior instead of calibration", [](Settings& s) -> bool& { return s.prior_only; });
    dbl("screen", "params", "parameter count for the prior (0: from the model)", [](Settings& s) -> double& { return s.params; });
    dbl("screen", "tokens", "token count for the prior (0: budget)", [](Settings& s) -> double& { return s.tokens; });
    sz("screen", "calib_steps", "calibration steps per seed", [](Settings& s) -> std::size_t& { return s.calib_steps; });
    str("screen", "calib_seeds", "comma list of calibration seeds", [](Settings& s) -> std::string& { return s.calib_seeds; });
    // report
    str("report", "family", "only report this architecture family", [](Settings& s) -> std::string& { return s.family; });
    str("report", "format", "text | json | csv | scatter", [](Settings& s) -> std::string& { return s.format; });
    sz("report", "family_size", "Bonferroni family size (0: comparisons in the report)",
       [](Settings& s) -> std::size_t& { return s.family_size; });
    str("report", "ingest", "report a published per-seed table instead of the manifest: scale1 | scale4",
        [](Settings& s) -> std::string& { return s.ingest; });
    return t;
  }();
  return table;
}

inline const SettingDef& find_setting(const std::string& section, const std::string& key) {
  for (const auto& d : setting_table())
    if (d.section == section && d.key == key) return d;
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

struct IniEntry {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Line-oriented key = value with [section] headers; '#' and ';' start comments.
inline std::vector<IniEntry> parse_ini(const std::string& text) {
  std::vector<IniEntry> out;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t n = 0;
  while (std::getline(in, raw)) {
    ++n;
    std::string line = raw;
    const auto c = line.find_first_of("#;");
    if (c != std::string::npos) line.resize(c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(n) + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    IniEntry e{section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), n};
    if (e.key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    if (section.empty()) throw ConfigError("config line " + std::to_string(n) + ": key outside any section");
    out.push_back(std::move(e));
  }
  return out;
}

// Applies entries of the fixed sections. Variant sections ("variant NAME")
// are returned separately for sweeps.
inline std::map<std::string, std::vector<IniEntry>> apply_ini(Settings& s, const std::vector<IniEntry>& entries) {
  std::map<std::string, std::vector<IniEntry>> variants;
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.section + "." + e.key).second)
      throw ConfigError("config line " + std::to_string(e.line) + ": duplicate key " + e.section + "." + e.key);
    if (e.section.rfind("variant ", 0) == 0) {
      const std::string name = detail::trim(e.section.substr(8));
      if (name.empty()) throw ConfigError("config line " + std::to_string(e.line) + ": variant needs a name");
      if (e.key != "label") find_setting("model", e.key);  // validates the key
      variants[name].push_back(e);
      continue;
    }
    try {
      find_setting(e.section, e.key).set(s, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError("config line " + std::to_string(e.line) + ": " + err.what());
    }
  }
  return variants;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Config text for the current settings; parse_ini + apply_ini restores them.
inline std::string dump_ini(const Settings& s) {
  std::string out, section;
  for (const auto& d : setting_table()) {
    if (d.section != section) {
      section = d.section;
      out += (out.empty() ? "" : "\n") + std::string("[") + section + "]\n";
    }
    out += d.key + " = " + d.get(s) + "\n";
  }
  return out;
}

// ---- data -------------------------------------------------------------------

inline TokenStream load_corpus(const DataSettings& d, std::size_t min_tokens) {
  if (!d.path.empty()) return ingest(d.path, d.format);
  const std::size_t n = std::max(d.corpus_tokens, min_tokens);
  return SyntheticCorpus(d.corpus_seed).stream(n);
}

// ---- manifest ---------------------------------------------------------------

inline constexpr int kManifestSchema = 1;

struct DuplicateCell : ConfigError {
  using ConfigError::ConfigError;
};

// JSON-lines file: a schema header line, then one RunRecord per line.
class Manifest {
 public:
  explicit Manifest(fs::path path) : path_(std::move(path)) { load(); }

  const fs::path& path() const { return path_; }
  const std::vector<RunRecord>& records() const { return records_; }
  bool contains(const std::string& id) const { return ids_.count(id) > 0; }
  std::size_t size() const { return records_.size(); }

  // Writes the record as one line with a single write() on an O_APPEND
  // descriptor, then fsyncs; a reader never sees half a record.
  void append(const RunRecord& r, bool force = false) {
    if (!force && contains(r.run_id)) throw DuplicateCell("cell " + r.run_id + " is already in " + path_.string());
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    drop_torn_tail();
    const bool fresh = !fs::exists(path_) || fs::file_size(path_) == 0;
    std::string line;
    if (fresh) line = header().dump() + "\n";
    line += r.to_json().dump() + "\n";
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw IoError("cannot open manifest " + path_.string() + ": " + std::strerror(errno));
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t w = ::write(fd, p, left);
      if (w < 0) {
        if (errno == EINTR) continue;
        const int err = errno;
        ::close(fd);
        throw IoError("manifest write failed: " + std::string(std::strerror(err)));
      }
      p += w;
      left -= static_cast<std::size_t>(w);
    }
    ::fsync(fd);
    ::close(fd);
    records_.push_back(r);
    ids_.insert(r.run_id);
  }

  static nlohmann::json header() { return {{"manifest", "normlab"}, {"schema", kManifestSchema}}; }

 private:
  // An interrupted write leaves bytes after the last newline; cut them so the
  // next record starts on its own line.
  void drop_torn_tail() const {
    if (!fs::exists(path_)) return;
    const std::string text = read_text(path_);
    if (text.empty() || text.back() == '\n') return;
    const auto nl = text.rfind('\n');
    fs::resize_file(path_, nl == std::string::npos ? 0 : nl + 1);
  }

  void load() {
    if (!fs::exists(path_)) return;
    const std::string text = read_text(path_);
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string::npos) break;  // unterminated tail: an interrupted write, ignored
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      ++line_no;
      if (detail::trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path_.string() + " line " + std::to_string(line_no) + ": " + e.what());
      }
      if (line_no == 1) {
        if (j.value("manifest", std::string()) != "normlab") throw FormatError(path_.string() + ": missing manifest header");
        if (j.value("schema", 0) != kManifestSchema) throw FormatError(path_.string() + ": unsupported manifest schema");
        continue;
      }
      RunRecord r = RunRecord::from_json(j);
      ids_.insert(r.run_id);
      records_.push_back(std::move(r));
    }
  }

  fs::path path_;
  std::vector<RunRecord> records_;
  std::set<std::string> ids_;
};

// ---- runs -------------------------------------------------------------------

// One training run plus the optional end-of-run saturation measurement.
template <class Real = float>
RunResult<Real> run_cell(const Settings& s, const ModelConfig& mc, const TrainConfig& tc, const TokenStream& corpus,
                         std::size_t train_tokens, const std::optional<fs::path>& ckpt_dir) {
  const DataBudget budget{train_tokens, s.data.val_tokens, s.data.corpus_seed};
  auto [train, val] = subset(corpus, budget);
  TrainHooks hooks;
  hooks.checkpoint_dir = ckpt_dir;
  auto res = train_run<Real>(mc, tc, train, val, budget, hooks);
  if (s.measure_saturation && mc.norm_kind == NormKind::dyt && res.record.status != RunStatus::diverged) {
    try {
      res.record.saturation = probes::saturation(res.model, val, s.sample, s.threshold).sigma;
    } catch (const NonFiniteError&) {
    }
  }
  return res;
}

// ---- sweep ------------------------------------------------------------------

struct Variant {
  std::string name;
  ModelConfig model;
};

struct Cell {
  std::string variant;
  ModelConfig model;
  TrainConfig train;
  std::size_t train_tokens = 0;
  std::string id;
};

struct SweepSpec {
  Settings base;
  std::vector<Variant> variants;

  // `overrides` runs after the fixed sections are applied and before the
  // variants are derived, so command-line flags reach every variant.
  static SweepSpec from_ini(const std::string& text, Settings base = {},
                            const std::function<void(Settings&)>& overrides = {}) {
    SweepSpec spec;
    const auto variants = apply_ini(base, parse_ini(text));
    if (overrides) overrides(base);
    spec.base = base;
    for (const auto& [name, entries] : variants) {
      Settings v = base;
      for (const auto& e : entries)
        if (e.key != "label") find_setting("model", e.key).set(v, e.value);
      v.model.validate();
      spec.variants.push_back({name, v.model});
    }
    if (spec.variants.empty()) spec.variants.push_back({"base", base.model});
    spec.validate();
    return spec;
  }

  void validate() const {
    if (base.budgets.empty()) throw ConfigError("sweep: budgets list is empty");
    if (base.seeds.empty()) throw ConfigError("sweep: seeds list is empty");
    std::set<std::uint64_t> seeds(base.seeds.begin(), base.seeds.end());
    if (seeds.size() != base.seeds.size()) throw ConfigError("sweep: duplicate seeds");
    std::set<std::size_t> budgets(base.budgets.begin(), base.budgets.end());
    if (budgets.size() != base.budgets.size()) throw ConfigError("sweep: duplicate budgets");
    std::set<std::uint64_t> hashes;
    for (const auto& v : variants)
      if (!hashes.insert(v.model.hash()).second) throw ConfigError("sweep: variant '" + v.name + "' duplicates another");
    base.train.validate();
  }

  // Full cross product in (variant, budget, seed) order.
  std::vector<Cell> cells() const {
    std::vector<Cell> out;
    for (const auto& v : variants)
      for (std::size_t b : base.budgets)
        for (std::uint64_t seed : base.seeds) {
          Cell c{v.name, v.model, base.train, b, ""};
          c.train.seed = seed;
          c.id = cell_id(c.model, c.train, DataBudget{b, base.data.val_tokens, base.data.corpus_seed});
          out.push_back(std::move(c));
        }
    return out;
  }
};

struct SweepSummary {
  std::size_t total = 0;
  std::size_t skipped = 0;  // already in the manifest
  std::size_t ran = 0;
  std::size_t merged = 0;   // finished cell files merged into the manifest
  std::vector<std::string> failures;
};

namespace detail {

inline fs::path cell_file(const fs::path& dir, const std::string& id) { return dir / "cells" / (id + ".json"); }
inline fs::path cell_error(const fs::path& dir, const std::string& id) { return dir / "cells" / (id + ".error"); }

inline void run_cell_to_file(const Settings& s, const Cell& c, const TokenStream& corpus) {
  const fs::path dir = s.out_dir();
  try {
    auto res = run_cell<float>(s, c.model, c.train, corpus, c.train_tokens, dir / "checkpoints" / c.id);
    res.record.note = res.record.note.empty() ? "variant " + c.variant : res.record.note + "; variant " + c.variant;
    normlab::detail::write_atomic(cell_file(dir, c.id), res.record.to_json().dump() + "\n");
  } catch (const std::exception& e) {
    normlab::detail::write_atomic(cell_error(dir, c.id), std::string(e.what()) + "\n");
  }
}

}  // namespace detail

// Runs every cell not yet in the manifest. Workers are forked processes that
// each write one cell file; the parent alone appends to the manifest.
inline SweepSummary run_sweep(const SweepSpec& spec, std::ostream* log = nullptr) {
  spec.validate();
  const Settings& s = spec.base;
  const fs::path dir = s.out_dir();
  fs::create_directories(dir / "cells");
  Manifest manifest(s.manifest_path());
  const auto cells = spec.cells();
  SweepSummary sum;
  sum.total = cells.size();

  auto merge = [&](const Cell& c) -> bool {
    const auto f = detail::cell_file(dir, c.id);
    if (fs::exists(f)) {
      manifest.append(RunRecord::from_json(nlohmann::json::parse(read_text(f))));
      ++sum.merged;
      return true;
    }
    const auto e = detail::cell_error(dir, c.id);
    sum.failures.push_back(c.id + ": " + (fs::exists(e) ? detail::trim(read_text(e)) : "worker exited without output"));
    return false;
  };

  std::vector<const Cell*> todo;
  for (const auto& c : cells) {
    if (manifest.contains(c.id)) {
      ++sum.skipped;
      continue;
    }
    // finished by an interrupted sweep but never merged
    if (fs::exists(detail::cell_file(dir, c.id))) {
      merge(c);
      ++sum.skipped;
      continue;
    }
    todo.push_back(&c);
  }
  if (s.limit > 0 && todo.size() > s.limit) todo.resize(s.limit);
  if (todo.empty()) return sum;

  std::size_t max_budget = 0;
  for (const auto* c : todo) max_budget = std::max(max_budget, c->train_tokens);
  const TokenStream corpus = load_corpus(s.data, max_budget + s.data.val_tokens);

  if (s.workers == 0) {
    for (const auto* c : todo) {
      if (log) *log << "cell " << c->id << " (" << c->variant << ", " << c->train_tokens << " tokens, seed " << c->train.seed << ")\n";
      fs::remove(detail::cell_error(dir, c->id));
      detail::run_cell_to_file(s, *c, corpus);
      ++sum.ran;
      merge(*c);
    }
    return sum;
  }

  std::map<pid_t, const Cell*> running;
  std::size_t next = 0;
  auto reap = [&]() {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid < 0) throw IoError(std::string("waitpid failed: ") + std::strerror(errno));
    auto it = running.find(pid);
    if (it == running.end()) return;
    const Cell* c = it->second;
    running.erase(it);
    ++sum.ran;
    merge(*c);
  };
  while (next < todo.size() || !running.empty()) {
    while (next < todo.size() && running.size() < s.workers) {
      const Cell* c = todo[next++];
      if (log) {
        *log << "cell " << c->id << " (" << c->variant << ", " << c->train_tokens << " tokens, seed " << c->train.seed << ")\n";
        log->flush();
      }
      fs::remove(detail::cell_error(dir, c->id));
      const pid_t pid = ::fork();
      if (pid < 0) throw IoError(std::string("fork failed: ") + std::strerror(errno));
      if (pid == 0) {
        detail::run_cell_to_file(s, *c, corpus);
        ::_exit(0);
      }
      running[pid] = c;
    }
    if (!running.empty()) reap();
  }
  return sum;
}

// ---- report -----------------------------------------------------------------

// Architecture family: everything except norm and attention kind.
inline std::string family_of(const ModelConfig& m) {
  std::string f = "L" + std::to_string(m.n_layer) + "-H" + std::to_string(m.n_head) + "-D" + std::to_string(m.d_model) +
                  "-T" + std::to_string(m.block_size) + "-V" + std::to_string(m.vocab_size) + "-" + name_of(m.ffn_kind) +
                  "-" + name_of(m.pos_kind);
  if (m.kv_heads() != m.n_head) f += "-kv" + std::to_string(m.kv_heads());
  if (m.dropout_p > 0) f += "-drop" + stats::format_fixed(m.dropout_p, 2);
  return f;
}

inline std::string condition_of(const ModelConfig& m) {
  const bool plain_norm = m.norm_kind == NormKind::layernorm || m.norm_kind == NormKind::rmsnorm;
  if (!m.is_diff()) return plain_norm ? "vanilla" : name_of(m.norm_kind);
  const std::string a = m.attn_kind == AttnKind::diff_v1 ? "diffattn" : "diffattn_sigmoid";
  return plain_norm ? a : std::string(name_of(m.norm_kind)) + "+" + a;
}

inline std::string format_tokens(std::size_t n) {
  if (n >= 1000000 && n % 1000000 == 0) return std::to_string(n / 1000000) + "M";
  if (n >= 1000 && n % 1000 == 0) return std::to_string(n / 1000) + "k";
  return std::to_string(n);
}

struct ReportCell {
  std::string family;
  std::size_t tokens = 0;
  std::string condition;
  std::map<std::string, double> by_seed;  // best val loss per seed
  std::vector<double> sigmas;
  stats::MeanStd loss;
  std::optional<double> delta;
  std::optional<double> p_raw, p_bonf;
  std::vector<std::string> flags;
};

struct Report {
  std::size_t family_size = 0;
  std::string family_size_rule;
  std::vector<ReportCell> cells;
};

// Records whose best val loss is not finite are left out and flagged.
inline Report build_report(const std::vector<RunRecord>& records, const std::string& family_filter = "",
                           std::size_t family_size = 0) {
  using Key = std::tuple<std::string, std::size_t, std::string>;
  std::map<Key, ReportCell> cells;
  std::map<Key, std::vector<std::string>> dropped;
  for (const auto& r : records) {
    const std::string fam = r.note.rfind("published table ", 0) == 0 ? "table-" + r.note.substr(16) : family_of(r.model);
    if (!family_filter.empty() && fam != family_filter) continue;
    const Key k{fam, r.budget.train_tokens, condition_of(r.model)};
    auto& c = cells[k];
    c.family = fam;
    c.tokens = r.budget.train_tokens;
    c.condition = std::get<2>(k);
    if (!std::isfinite(r.best_val_loss)) {
      c.flags.push_back("seed " + std::to_string(r.seed) + " has no finite val loss (" + name_of(r.status) + ")");
      continue;
    }
    c.by_seed[std::to_string(r.seed)] = r.best_val_loss;  // a forced re-run replaces the earlier record
    if (r.saturation) c.sigmas.push_back(*r.saturation);
  }
  Report rep;
  std::size_t comparisons = 0;
  for (auto& [k, c] : cells) {
    if (c.by_seed.empty()) continue;
    std::vector<double> v;
    for (const auto& [_, x] : c.by_seed) v.push_back(x);
    c.loss = stats::mean_std(v, 0);
    if (v.size() < 2) c.flags.push_back("single seed: std and p omitted");
    if (c.condition == "vanilla") continue;
    const auto base = cells.find(Key{c.family, c.tokens, "vanilla"});
    if (base == cells.end() || base->second.by_seed.empty()) {
      c.flags.push_back("no vanilla baseline: delta unavailable");
      continue;
    }
    std::vector<double> bv;
    for (const auto& [_, x] : base->second.by_seed) bv.push_back(x);
    c.delta = stats::delta_percent(stats::mean_std(bv, 0).mean, c.loss.mean);
    std::map<std::string, double> a, b;
    for (const auto& [seed, x] : c.by_seed)
      if (base->second.by_seed.count(seed)) {
        a[seed] = base->second.by_seed.at(seed);
        b[seed] = x;
      }
    if (a.size() >= 2) {
      const auto t = stats::paired_t(stats::PairedSample::align(a, b));
      c.p_raw = t.p;
      if (t.degenerate) c.flags.push_back("zero-variance differences");
      ++comparisons;
    } else if (v.size() >= 2) {
      c.flags.push_back("fewer than 2 seeds shared with vanilla: p omitted");
    }
  }
  rep.family_size = family_size > 0 ? family_size : std::max<std::size_t>(comparisons, 1);
  rep.family_size_rule = family_size > 0 ? "set by --family-size" : "comparisons in this report";
  for (auto& [k, c] : cells) {
    if (c.by_seed.empty() && c.flags.empty()) continue;
    if (c.p_raw) c.p_bonf = stats::bonferroni(*c.p_raw, rep.family_size);
    rep.cells.push_back(std::move(c));
  }
  return rep;
}

inline nlohmann::json report_json(const Report& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json seeds = nlohmann::json::object();
    for (const auto& [s, v] : c.by_seed) seeds[s] = v;
    std::optional<double> sigma;
    if (!c.sigmas.empty()) sigma = stats::mean_std(c.sigmas, 0).mean;
    cells.push_back({{"family", c.family},
                     {"tokens", c.tokens},
                     {"condition", c.condition},
                     {"seeds", seeds},
                     {"mean", c.by_seed.empty() ? nlohmann::json(nullptr) : nlohmann::json(c.loss.mean)},
                     {"std", c.loss.std_defined && c.by_seed.size() >= 2 ? nlohmann::json(c.loss.std) : nlohmann::json(nullptr)},
                     {"delta_pct", opt(c.delta)},
                     {"p_raw", opt(c.p_raw)},
                     {"p_bonf", opt(c.p_bonf)},
                     {"sigma", opt(sigma)},
                     {"flags", c.flags}});
  }
  return {{"family_size", r.family_size}, {"family_size_rule", r.family_size_rule}, {"std", "population"}, {"cells", cells}};
}

inline std::string report_text(const Report& r) {
  std::ostringstream os;
  os << "# Bonferroni family size m = " << r.family_size << " (" << r.family_size_rule << "); std over seeds is population std\n";
  std::string fam;
  for (const auto& c : r.cells) {
    if (c.family != fam) {
      fam = c.family;
      os << "\nfamily " << fam << "\n";
      os << "tokens   condition         n  mean    std    delta    p_raw    p_bonf\n";
    }
    char line[256];
    const std::string mean = c.by_seed.empty() ? "-" : stats::format_fixed(c.loss.mean, 3);
    const std::string sd = c.by_seed.size() >= 2 ? stats::format_fixed(c.loss.std, 3) : "-";
    const std::string d = c.delta ? stats::format_delta(*c.delta) : "-";
    const std::string pr = c.p_raw ? stats::format_p(*c.p_raw) : "-";
    const std::string pb = c.p_bonf ? stats::format_p(*c.p_bonf) + " " + stats::star_band(*c.p_bonf) : "-";
    std::snprintf(line, sizeof line, "%-8s %-17s %-2zu %-7s %-6s %-8s %-8s %s\n", format_tokens(c.tokens).c_str(),
                  c.condition.c_str(), c.by_seed.size(), mean.c_str(), sd.c_str(), d.c_str(), pr.c_str(), pb.c_str());
    os << line;
    for (const auto& f : c.flags) os << "         ! " << f << "\n";
  }
  return os.str();
}

inline std::string report_csv(const Report& r) {
  std::ostringstream os;
  os << "family,tokens,condition,n,mean,std,delta_pct,p_raw,p_bonf\n";
  for (const auto& c : r.cells) {
    os << c.family << "," << c.tokens << "," << c.condition << "," << c.by_seed.size() << ","
       << (c.by_seed.empty() ? "" : detail::fmt_double(c.loss.mean)) << ","
       << (c.by_seed.size() >= 2 ? detail::fmt_double(c.loss.std) : "") << ","
       << (c.delta ? detail::fmt_double(*c.delta) : "") << "," << (c.p_raw ? detail::fmt_double(*c.p_raw) : "") << ","
       << (c.p_bonf ? detail::fmt_double(*c.p_bonf) : "") << "\n";
  }
  return os.str();
}

// (sigma, delta) pairs of non-vanilla cells that carry a saturation value.
inline std::string scatter_csv(const Report& r) {
  std::ostringstream os;
  os << "cell,sigma,delta_pct\n";
  for (const auto& c : r.cells) {
    if (c.sigmas.empty() || !c.delta) continue;
    os << c.family << "/" << format_tokens(c.tokens) << "/" << c.condition << ","
       << detail::fmt_double(stats::mean_std(c.sigmas, 0).mean) << "," << detail::fmt_double(*c.delta) << "\n";
  }
  return os.str();
}

// Run records standing in for a published per-seed table: one record per
// (tokens, config, seed) whose best val loss is the printed value.
inline std::vector<RunRecord> fixture_records(const fixtures::SeedTable& t) {
  std::vector<RunRecord> out;
  auto tokens_of = [](const std::string& s) {
    return static_cast<std::size_t>(std::stod(s.substr(0, s.size() - 1)) * 1e6);
  };
  for (const auto& row : t.rows)
    for (std::size_t i = 0; i < fixtures::kSeeds.size(); ++i) {
      RunRecord r;
      r.model.n_layer = 0;  // marks a table row, not a trained model
      r.model.n_head = 0;
      r.model.d_model = static_cast<std::size_t>(t.params / 1e6);
      if (row.config == "dyt") r.model.norm_kind = NormKind::dyt;
      if (row.config == "diffattn") r.model.attn_kind = AttnKind::diff_v1;
      r.seed = std::stoull(fixtures::kSeeds[i]);
      r.budget.train_tokens = tokens_of(row.tokens);
      r.best_val_loss = row.values[i];
      r.run_id = t.scale + "/" + row.tokens + "/" + row.config + "/" + fixtures::kSeeds[i];
      r.note = "published table " + t.scale;
      out.push_back(std::move(r));
    }
  return out;
}

}  // namespace normlab::harness
