// SPDX-License-Identifier: Apache-2.0
// normlab: train, sweep, screen, probe and report on normalization variants.

#include <cstdlib>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "normlab/normlab.hpp"

namespace nl = normlab;
namespace hs = normlab::harness;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kUsage = 1, kIo = 2;

// Every setting in the shared table becomes a flag on each subcommand.
struct FlagSet {
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
  std::map<std::string, CLI::Option*> opts;
  std::string config;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "config file with [section] key = value lines");
    for (const auto& d : hs::setting_table()) {
      const std::string name = d.section + "." + d.key;
      const bool is_switch = d.key == "force" || d.key == "prior_only";
      if (is_switch) opts[name] = app->add_flag(d.flag(), switches[name], d.help);
      else opts[name] = app->add_option(d.flag(), values[name], d.help);
    }
  }

  // Precedence, lowest first: defaults, NORMLAB_OUT, --config, flags.
  hs::Settings resolve() const {
    hs::Settings s;
    if (const char* env = std::getenv("NORMLAB_OUT"); env && *env) s.out = env;
    if (!config.empty()) hs::apply_ini(s, hs::parse_ini(hs::read_text(config)));
    apply_flags(s);
    return s;
  }

  void apply_flags(hs::Settings& s) const {
    for (const auto& d : hs::setting_table()) {
      const std::string name = d.section + "." + d.key;
      const CLI::Option* o = opts.at(name);
      if (o->count() == 0) continue;
      if (switches.count(name)) d.set(s, switches.at(name) ? "true" : "false");
      else d.set(s, values.at(name));
    }
  }

  bool given(const std::string& name) const { return opts.at(name)->count() > 0; }
};

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_train(const FlagSet& f) {
  hs::Settings s = f.resolve();
  s.model.validate();
  s.train.validate();
  const nl::DataBudget budget{s.data.train_tokens, s.data.val_tokens, s.data.corpus_seed};
  const std::string id = nl::cell_id(s.model, s.train, budget);
  hs::Manifest manifest(s.manifest_path());
  if (!s.force && manifest.contains(id))
    throw hs::DuplicateCell("cell " + id + " is already in " + manifest.path().string() + " (use --force to re-run)");
  const auto corpus = hs::load_corpus(s.data, s.data.train_tokens + s.data.val_tokens);
  auto res = hs::run_cell<float>(s, s.model, s.train, corpus, s.data.train_tokens, s.out_dir() / "checkpoints" / id);
  manifest.append(res.record, s.force);
  const auto& r = res.record;
  std::cerr << "run " << r.run_id << " " << nl::name_of(r.status) << ": best val " << r.best_val_loss << ", final train "
            << r.final_train_loss << ", " << r.wall_seconds << " s\n";
  print_json(r.to_json());
  return kOk;
}

int cmd_sweep(const FlagSet& f, const std::string& spec_path) {
  hs::Settings base;
  if (const char* env = std::getenv("NORMLAB_OUT"); env && *env) base.out = env;
  if (!f.config.empty()) hs::apply_ini(base, hs::parse_ini(hs::read_text(f.config)));
  const hs::SweepSpec spec =
      hs::SweepSpec::from_ini(hs::read_text(spec_path), base, [&](hs::Settings& s) { f.apply_flags(s); });
  const auto sum = hs::run_sweep(spec, &std::cerr);
  print_json({{"cells", sum.total},
              {"skipped", sum.skipped},
              {"ran", sum.ran},
              {"merged", sum.merged},
              {"failures", sum.failures},
              {"manifest", spec.base.manifest_path().string()}});
  return kOk;
}

int cmd_report(const FlagSet& f, const std::string& manifest_arg) {
  hs::Settings s = f.resolve();
  std::vector<nl::RunRecord> records;
  if (s.ingest == "scale1") records = hs::fixture_records(nl::fixtures::scale1_per_seed());
  else if (s.ingest == "scale4") records = hs::fixture_records(nl::fixtures::scale4_per_seed());
  else if (!s.ingest.empty()) throw nl::ConfigError("ingest: expected scale1 or scale4, got '" + s.ingest + "'");
  else records = hs::Manifest(manifest_arg.empty() ? s.manifest_path() : fs::path(manifest_arg)).records();
  const auto rep = hs::build_report(records, s.family, s.family_size);
  if (s.format == "text") std::cout << hs::report_text(rep);
  else if (s.format == "json") std::cout << hs::report_json(rep).dump(2) << "\n";
  else if (s.format == "csv") std::cout << hs::report_csv(rep);
  else if (s.format == "scatter") std::cout << hs::scatter_csv(rep);
  else throw nl::ConfigError("format: expected text, json, csv or scatter, got '" + s.format + "'");
  return kOk;
}

int cmd_screen(const FlagSet& f) {
  hs::Settings s = f.resolve();
  if (!f.given("model.norm")) s.model.norm_kind = nl::NormKind::dyt;
  nl::screening::Thresholds th;
  th.probe_threshold = s.threshold;
  nl::screening::ScreeningDecision d;
  if (s.prior_only) {
    double params = s.params;
    if (params <= 0) params = static_cast<double>(nl::Model<float>(s.model, 0).num_params());
    const double tokens = s.tokens > 0 ? s.tokens : static_cast<double>(s.data.train_tokens);
    // explicit --params describes an external GPT-2-style model
    d = nl::screening::decide_prior(params, tokens, s.params > 0 ? nullptr : &s.model, th);
  } else {
    std::vector<std::uint64_t> seeds;
    for (const auto& x : hs::detail::split_list(s.calib_seeds)) seeds.push_back(hs::detail::to_u64("calib_seeds", x));
    const auto corpus = hs::load_corpus(s.data, s.data.train_tokens + s.data.val_tokens);
    const nl::DataBudget budget{s.data.train_tokens, s.data.val_tokens, s.data.corpus_seed};
    auto [train, val] = nl::subset(corpus, budget);
    nl::screening::CalibrationOptions opt;
    opt.steps = s.calib_steps;
    opt.sample = s.sample;
    opt.probe_threshold = s.threshold;
    const auto runs = nl::screening::calibrate<float>(s.model, s.train, train, val, budget, seeds, opt);
    d = nl::screening::decide(runs, s.model, th);
  }
  std::cerr << "verdict: " << nl::screening::name_of(d.verdict);
  if (d.mean_sigma) std::cerr << " (mean sigma " << *d.mean_sigma << ")";
  if (d.prior) std::cerr << " (T/P " << d.prior->ratio << ", " << d.prior->reason << ")";
  std::cerr << "\n";
  const auto j = d.to_json();
  nl::detail::write_atomic(s.out_dir() / "screen.json", j.dump(2) + "\n");
  print_json(j);
  return kOk;
}

int cmd_probe(const FlagSet& f) {
  hs::Settings s = f.resolve();
  if (s.checkpoint.empty()) throw nl::ConfigError("probe needs --checkpoint");
  const auto ck = nl::load_checkpoint<float>(s.checkpoint);
  const auto& model = ck.model;
  const auto corpus = hs::load_corpus(s.data, s.data.train_tokens + s.data.val_tokens);
  auto [train, val] = nl::subset(corpus, {s.data.train_tokens, s.data.val_tokens, s.data.corpus_seed});
  nlohmann::json out = {{"checkpoint", s.checkpoint}, {"step", ck.step}};
  nlohmann::json errors = nlohmann::json::object();
  std::string csv = "probe,item,value\n";
  std::size_t ok = 0;
  const auto which = hs::detail::split_list(s.which);
  for (const auto& w : which) {
    try {
      if (w == "saturation") {
        const auto r = model.config().norm_kind == nl::NormKind::hardtanh
                           ? nl::probes::hardtanh_saturation(model, val, s.sample)
                           : nl::probes::saturation(model, val, s.sample, s.threshold);
        out[w] = r.to_json();
        for (const auto& c : r.sites) csv += w + "," + c.name + "," + hs::detail::fmt_double(c.fraction()) + "\n";
        csv += w + ",global," + hs::detail::fmt_double(r.sigma) + "\n";
      } else if (w == "alpha-report") {
        const auto r = nl::probes::alpha_report(model);
        out[w] = r.to_json();
        for (std::size_t i = 0; i < r.sites.size(); ++i) csv += w + "," + r.sites[i] + "," + hs::detail::fmt_double(r.alphas[i]) + "\n";
      } else if (w == "act-rank") {
        const auto r = nl::probes::activation_effective_rank(model, val, s.rank_batch, 0, s.sample.seed);
        out[w] = r.to_json();
        for (std::size_t i = 0; i < r.per_block.size(); ++i)
          csv += w + ",h." + std::to_string(i) + "," + hs::detail::fmt_double(r.per_block[i]) + "\n";
      } else if (w == "weight-geom") {
        const auto r = nl::probes::weight_geometry(model);
        out[w] = r.to_json();
        csv += w + ",frobenius," + hs::detail::fmt_double(r.frobenius) + "\n";
        csv += w + ",mean_eff_rank," + hs::detail::fmt_double(r.mean_eff_rank) + "\n";
      } else if (w == "lipschitz") {
        const std::size_t T = model.config().block_size;
        const auto x = nl::probes::sample_tokens(val, 1, T, s.sample.seed, 0);
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& e : hs::detail::split_list(s.eps)) {
          const auto r = nl::probes::lipschitz_probe(model, x, 1, T, hs::detail::to_double("eps", e), s.trials, s.sample.seed);
          arr.push_back(r.to_json());
          csv += w + ",eps=" + e + "," + hs::detail::fmt_double(r.mean) + "\n";
        }
        out[w] = arr;
      } else {
        throw nl::ConfigError("unknown probe '" + w + "'");
      }
      ++ok;
    } catch (const nl::Error& e) {
      errors[w] = e.what();
    }
  }
  out["errors"] = errors;
  const fs::path dir = s.out_dir();
  nl::detail::write_atomic(dir / "probe.json", out.dump(2) + "\n");
  nl::detail::write_atomic(dir / "probe.csv", csv);
  print_json(out);
  return ok > 0 || which.empty() ? kOk : kUsage;
}

int cmd_fixtures(const std::string& dir) {
  for (const auto& [name, doc] : nl::fixtures::all_fixtures()) {
    nl::detail::write_atomic(fs::path(dir) / name, doc.dump(2) + "\n");
    std::cout << (fs::path(dir) / name).string() << "\n";
  }
  return kOk;
}

int cmd_corpus(const FlagSet& f, const std::string& path) {
  hs::Settings s = f.resolve();
  const std::string text = nl::SyntheticCorpus(s.data.corpus_seed).generate(s.data.corpus_tokens);
  if (s.data.format == nl::CorpusFormat::raw_bytes) {
    nl::detail::write_atomic(path, text);
  } else {
    const auto stream = nl::from_bytes(text);
    nl::detail::write_atomic(path, nl::encode_token_file(stream.ids, 256));
  }
  std::cout << path << ": " << s.data.corpus_tokens << " tokens\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  nl::tune_allocator();
  CLI::App app{"normlab: normalization-free transformer experiments"};
  app.require_subcommand(1);

  FlagSet train_f, sweep_f, report_f, screen_f, probe_f, corpus_f;
  auto* train = app.add_subcommand("train", "train one cell and append it to the manifest");
  train_f.attach(train);
  auto* sweep = app.add_subcommand("sweep", "run every cell of a sweep spec");
  std::string spec_path;
  sweep->add_option("spec", spec_path, "sweep spec file")->required();
  sweep_f.attach(sweep);
  auto* report = app.add_subcommand("report", "phase table, deltas and paired tests from a manifest");
  std::string manifest_arg;
  report->add_option("manifest_file", manifest_arg, "manifest file (default <out>/manifest.jsonl)");
  report_f.attach(report);
  auto* screen = app.add_subcommand("screen", "decide whether DyT is worth trying");
  screen_f.attach(screen);
  auto* probe = app.add_subcommand("probe", "run measurement probes on a checkpoint");
  probe_f.attach(probe);
  auto* fixtures = app.add_subcommand("fixtures", "write the published result tables as JSON");
  std::string fixture_dir = "fixtures";
  fixtures->add_option("dir", fixture_dir, "output directory");
  auto* corpus = app.add_subcommand("corpus", "write the synthetic text corpus");
  std::string corpus_path;
  corpus->add_option("path", corpus_path, "output file")->required();
  corpus_f.attach(corpus);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }
  try {
    if (train->parsed()) return cmd_train(train_f);
    if (sweep->parsed()) return cmd_sweep(sweep_f, spec_path);
    if (report->parsed()) return cmd_report(report_f, manifest_arg);
    if (screen->parsed()) return cmd_screen(screen_f);
    if (probe->parsed()) return cmd_probe(probe_f);
    if (fixtures->parsed()) return cmd_fixtures(fixture_dir);
    if (corpus->parsed()) return cmd_corpus(corpus_f, corpus_path);
  } catch (const nl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
