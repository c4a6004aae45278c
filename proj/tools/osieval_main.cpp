// Copyright 2026 The osieval Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// osieval: command-line pipeline for open-set speaker identification
// evaluation over embedding files. Stages communicate through files only;
// every output gets a manifest recording the tool version, configuration,
// and input digests. Exit codes: 0 success, 1 input or contract error,
// 2 internal error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "osi/osi.hpp"

namespace {

using nlohmann::ordered_json;

osi::StoreFormat resolve_format(const std::string& path, const std::string& flag) {
  if (flag == "binary") return osi::StoreFormat::kBinary;
  if (flag == "jsonl") return osi::StoreFormat::kJsonl;
  if (flag != "auto")
    throw osi::ContractError("unknown format '" + flag +
                             "' (expected auto, binary, or jsonl)");
  if (path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0)
    return osi::StoreFormat::kJsonl;
  return osi::StoreFormat::kBinary;
}

osi::EmbeddingStore load_store(const std::string& path, const std::string& flag = "auto") {
  return osi::ingest(path, resolve_format(path, flag));
}

void guard_outputs(const std::vector<std::string>& inputs,
                   const std::vector<std::string>& outputs) {
  for (const std::string& out : outputs)
    for (const std::string& in : inputs)
      if (out == in)
        throw osi::ContractError("output path '" + out +
                                 "' would overwrite an input; inputs are read-only");
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> sizes;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      sizes.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw osi::ContractError("bad watchlist size '" + item + "' in --sizes");
    }
  }
  if (sizes.empty()) throw osi::ContractError("--sizes must list at least one size");
  return sizes;
}

std::vector<std::pair<double, double>> parse_durations(const std::string& text) {
  std::vector<std::pair<double, double>> table;
  if (text.empty()) return table;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw osi::ContractError("bad --durations entry '" + item +
                               "' (expected seconds:multiplier)");
    try {
      table.emplace_back(std::stod(item.substr(0, colon)),
                         std::stod(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw osi::ContractError("bad --durations entry '" + item + "'");
    }
  }
  return table;
}

double parse_level(const std::string& text, const std::string& flag) {
  try {
    const double v = std::stod(text);
    if (v > 0.0 && v < 1.0) return v;
  } catch (const std::exception&) {
  }
  throw osi::ContractError("bad " + flag + " level '" + text +
                           "' (expected a rate in (0, 1))");
}

std::vector<std::string> parse_measures(const std::string& text) {
  std::vector<std::string> names;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) names.push_back(item);
  if (names.empty()) throw osi::ContractError("--measures must list at least one measure");
  return names;
}

// Options shared by the synthetic-population subcommands.
struct SynthFlags {
  std::size_t speakers = 0;
  std::size_t recs = 3;
  std::size_t dim = 128;
  double spread = 0.3;
  double spread_jitter = 0.0;
  double mag_mean = 10.0;
  double mag_spread = 2.0;
  double snr_mean = 20.0;
  double snr_spread = 5.0;
  double quality_rho = 0.5;
  std::string durations;
  std::uint64_t seed = 0;
  std::int64_t noise_seed = -1;  // <0 means unset

  void attach(CLI::App* cmd) {
    cmd->add_option("--speakers", speakers, "number of speakers")->required();
    cmd->add_option("--recs", recs, "recordings per speaker (>= 2)");
    cmd->add_option("--dim", dim, "embedding dimension");
    cmd->add_option("--spread", spread, "within-speaker noise scale epsilon");
    cmd->add_option("--spread-jitter", spread_jitter,
                    "lognormal jitter of the per-recording noise scale");
    cmd->add_option("--mag-mean", mag_mean, "mean raw magnitude");
    cmd->add_option("--mag-spread", mag_spread, "raw magnitude spread");
    cmd->add_option("--snr-mean", snr_mean, "mean synthetic SNR in dB");
    cmd->add_option("--snr-spread", snr_spread, "synthetic SNR spread in dB");
    cmd->add_option("--quality-rho", quality_rho,
                    "correlation between noise jitter and SNR/magnitude");
    cmd->add_option("--durations", durations,
                    "duration table 'seconds:multiplier,...' scaling the noise");
    cmd->add_option("--seed", seed, "generator seed");
    cmd->add_option("--noise-seed", noise_seed,
                    "separate seed for noise/quality draws (same centroids)");
  }

  osi::SynthConfig config() const {
    osi::SynthConfig cfg;
    cfg.n_speakers = speakers;
    cfg.recordings_per_speaker = recs;
    cfg.dim = dim;
    cfg.within_spread = spread;
    cfg.spread_jitter = spread_jitter;
    cfg.magnitude_mean = mag_mean;
    cfg.magnitude_spread = mag_spread;
    cfg.snr_mean_db = snr_mean;
    cfg.snr_spread_db = snr_spread;
    cfg.quality_rho = quality_rho;
    cfg.duration_to_spread = parse_durations(durations);
    cfg.seed = seed;
    if (noise_seed >= 0) cfg.noise_seed = static_cast<std::uint64_t>(noise_seed);
    return cfg;
  }

  ordered_json manifest_config() const {
    ordered_json j;
    j["speakers"] = speakers;
    j["recs"] = recs;
    j["dim"] = dim;
    j["spread"] = spread;
    j["spread_jitter"] = spread_jitter;
    j["mag_mean"] = mag_mean;
    j["mag_spread"] = mag_spread;
    j["snr_mean"] = snr_mean;
    j["snr_spread"] = snr_spread;
    j["quality_rho"] = quality_rho;
    j["durations"] = durations;
    j["seed"] = seed;
    if (noise_seed >= 0) j["noise_seed"] = noise_seed;
    return j;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"open-set speaker identification evaluation pipeline"};
  app.require_subcommand(1);
  unsigned threads = 0;

  // ingest
  auto* c_ingest = app.add_subcommand("ingest", "validate and convert an embedding file");
  struct {
    std::string in, format = "auto", out, out_format = "auto";
  } ingest_opts;
  c_ingest->add_option("--in", ingest_opts.in, "input embedding file")->required();
  c_ingest->add_option("--format", ingest_opts.format, "input format: auto|binary|jsonl");
  c_ingest->add_option("--out", ingest_opts.out, "output embedding file")->required();
  c_ingest->add_option("--out-format", ingest_opts.out_format,
                       "output format: auto|binary|jsonl");
  c_ingest->callback([&] {
    guard_outputs({ingest_opts.in}, {ingest_opts.out});
    const osi::EmbeddingStore store = load_store(ingest_opts.in, ingest_opts.format);
    const osi::StoreFormat out_format =
        resolve_format(ingest_opts.out, ingest_opts.out_format);
    if (out_format == osi::StoreFormat::kBinary)
      osi::write_binary(store, ingest_opts.out);
    else
      osi::write_jsonl(store, ingest_opts.out);
    ordered_json cfg;
    cfg["in"] = ingest_opts.in;
    cfg["out"] = ingest_opts.out;
    cfg["out_format"] = out_format == osi::StoreFormat::kBinary ? "binary" : "jsonl";
    osi::write_manifest(ingest_opts.out, "ingest", cfg, {ingest_opts.in});
    std::cerr << "ingested " << store.size() << " records (dimension "
              << store.dimension() << ") from " << ingest_opts.in << "\n";
  });

  // simulate
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic embedding store");
  SynthFlags sim_flags;
  std::string sim_out;
  sim_flags.attach(c_sim);
  c_sim->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_sim->add_option("--out", sim_out, "output store path")->required();
  c_sim->callback([&] {
    const osi::EmbeddingStore store = osi::generate(sim_flags.config(), threads);
    if (resolve_format(sim_out, "auto") == osi::StoreFormat::kBinary)
      osi::write_binary(store, sim_out);
    else
      osi::write_jsonl(store, sim_out);
    osi::write_manifest(sim_out, "simulate", sim_flags.manifest_config(), {});
    std::cerr << "generated " << store.size() << " records for "
              << store.speakers().size() << " speakers\n";
  });

  // build-watchlists
  auto* c_build = app.add_subcommand("build-watchlists",
                                     "construct watchlist splits and enrollments");
  struct {
    std::string store, mode = "kfold", out;
    std::size_t size = 0;
    std::uint64_t seed = 0;
  } build_opts;
  c_build->add_option("--store", build_opts.store, "embedding store")->required();
  c_build->add_option("--mode", build_opts.mode, "split mode: kfold|loso");
  c_build->add_option("--size", build_opts.size, "watchlist size W (kfold mode)");
  c_build->add_option("--seed", build_opts.seed, "shuffle and enrollment seed");
  c_build->add_option("--out", build_opts.out, "output plan path")->required();
  c_build->callback([&] {
    guard_outputs({build_opts.store}, {build_opts.out});
    const osi::EmbeddingStore store = load_store(build_opts.store);
    const osi::SplitMode mode = osi::split_mode_from_string(build_opts.mode);
    osi::SplitPlan plan =
        mode == osi::SplitMode::kKfold
            ? osi::build_kfold(store.speakers(), build_opts.size, build_opts.seed)
            : osi::build_loso(store.speakers(), build_opts.seed);
    osi::select_enrollment(plan, store, build_opts.seed);
    osi::write_plan(plan, build_opts.out);
    ordered_json cfg;
    cfg["store"] = build_opts.store;
    cfg["mode"] = build_opts.mode;
    cfg["size"] = plan.watchlist_size;
    cfg["seed"] = build_opts.seed;
    osi::write_manifest(build_opts.out, "build-watchlists", cfg, {build_opts.store});
    std::cerr << "built " << plan.splits.size() << " splits of watchlist size "
              << plan.watchlist_size << "\n";
  });

  // make-trials
  auto* c_trials = app.add_subcommand("make-trials", "enumerate evaluation trials");
  struct {
    std::string plan, store, out;
    std::int64_t max_per_label = -1;
    std::uint64_t seed = 0;
  } trial_opts;
  c_trials->add_option("--plan", trial_opts.plan, "split plan")->required();
  c_trials->add_option("--store", trial_opts.store, "embedding store")->required();
  c_trials->add_option("--max-trials-per-label", trial_opts.max_per_label,
                       "sub-sample each label to this many trials");
  c_trials->add_option("--seed", trial_opts.seed, "sub-sampling seed");
  c_trials->add_option("--out", trial_opts.out, "output trial list")->required();
  c_trials->callback([&] {
    guard_outputs({trial_opts.plan, trial_opts.store}, {trial_opts.out});
    const osi::EmbeddingStore store = load_store(trial_opts.store);
    const osi::SplitPlan plan = osi::read_plan(trial_opts.plan);
    std::optional<std::size_t> cap;
    if (trial_opts.max_per_label >= 0)
      cap = static_cast<std::size_t>(trial_opts.max_per_label);
    const std::vector<osi::Trial> trials =
        osi::make_trials(plan, store, cap, trial_opts.seed);
    osi::write_trials(trials, trial_opts.out);
    std::size_t n_inset = 0;
    for (const osi::Trial& t : trials)
      if (t.label == osi::TrialLabel::kInset) ++n_inset;
    ordered_json cfg;
    cfg["plan"] = trial_opts.plan;
    cfg["store"] = trial_opts.store;
    if (cap) cfg["max_trials_per_label"] = *cap;
    cfg["seed"] = trial_opts.seed;
    osi::write_manifest(trial_opts.out, "make-trials", cfg,
                        {trial_opts.plan, trial_opts.store});
    std::cerr << "made " << n_inset << " inset and " << (trials.size() - n_inset)
              << " oos trials\n";
  });

  // score
  auto* c_score = app.add_subcommand("score", "score trials with the max rule");
  struct {
    std::string plan, store, trials, out;
  } score_opts;
  c_score->add_option("--plan", score_opts.plan, "split plan")->required();
  c_score->add_option("--store", score_opts.store, "embedding store")->required();
  c_score->add_option("--trials", score_opts.trials, "trial list")->required();
  c_score->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_score->add_option("--out", score_opts.out, "output score file")->required();
  c_score->callback([&] {
    guard_outputs({score_opts.plan, score_opts.store, score_opts.trials},
                  {score_opts.out});
    const osi::EmbeddingStore store = load_store(score_opts.store);
    const osi::SplitPlan plan = osi::read_plan(score_opts.plan);
    const std::vector<osi::Trial> trials = osi::read_trials(score_opts.trials);
    const std::vector<osi::ScoreRecord> records =
        osi::score_run(plan, trials, store, threads);
    osi::write_scores(records, score_opts.out);
    ordered_json cfg;
    cfg["plan"] = score_opts.plan;
    cfg["store"] = score_opts.store;
    cfg["trials"] = score_opts.trials;
    osi::write_manifest(score_opts.out, "score", cfg,
                        {score_opts.plan, score_opts.store, score_opts.trials});
    std::cerr << "scored " << records.size() << " trials\n";
  });

  // asnorm
  auto* c_asnorm = app.add_subcommand("asnorm", "adaptive score normalization");
  struct {
    std::string scores, plan, store, cohort, out;
    std::size_t topk = 1000;
  } asnorm_opts;
  c_asnorm->add_option("--scores", asnorm_opts.scores, "score file")->required();
  c_asnorm->add_option("--plan", asnorm_opts.plan, "split plan")->required();
  c_asnorm->add_option("--store", asnorm_opts.store, "embedding store")->required();
  c_asnorm->add_option("--cohort", asnorm_opts.cohort, "cohort embedding store")
      ->required();
  c_asnorm->add_option("--topk", asnorm_opts.topk, "top-k cohort size");
  c_asnorm->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_asnorm->add_option("--out", asnorm_opts.out, "output score file")->required();
  c_asnorm->callback([&] {
    guard_outputs(
        {asnorm_opts.scores, asnorm_opts.plan, asnorm_opts.store, asnorm_opts.cohort},
        {asnorm_opts.out});
    const osi::EmbeddingStore store = load_store(asnorm_opts.store);
    const osi::EmbeddingStore cohort_store = load_store(asnorm_opts.cohort);
    const osi::SplitPlan plan = osi::read_plan(asnorm_opts.plan);
    const std::vector<osi::ScoreRecord> records = osi::read_scores(asnorm_opts.scores);
    const osi::CohortSet cohort{&cohort_store, asnorm_opts.topk};
    const std::vector<osi::ScoreRecord> normalized =
        osi::normalize_run(records, plan, store, cohort, threads);
    osi::write_scores(normalized, asnorm_opts.out);
    ordered_json cfg;
    cfg["scores"] = asnorm_opts.scores;
    cfg["plan"] = asnorm_opts.plan;
    cfg["store"] = asnorm_opts.store;
    cfg["cohort"] = asnorm_opts.cohort;
    cfg["topk"] = asnorm_opts.topk;
    osi::write_manifest(
        asnorm_opts.out, "asnorm", cfg,
        {asnorm_opts.scores, asnorm_opts.plan, asnorm_opts.store, asnorm_opts.cohort});
    std::cerr << "normalized " << normalized.size() << " trials (top-"
              << asnorm_opts.topk << " cohort)\n";
  });

  // calibrate-train
  auto* c_ctrain = app.add_subcommand("calibrate-train",
                                      "train quality-measure calibration weights");
  struct {
    std::string scores, plan, store, cohort, out;
    std::string measures;
    bool with_duration = false;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
  } ctrain_opts;
  c_ctrain->add_option("--scores", ctrain_opts.scores, "score file")->required();
  c_ctrain->add_option("--plan", ctrain_opts.plan, "split plan")->required();
  c_ctrain->add_option("--store", ctrain_opts.store, "embedding store")->required();
  c_ctrain->add_option("--cohort", ctrain_opts.cohort,
                       "cohort store (needed for impostor measures)");
  c_ctrain->add_option("--measures", ctrain_opts.measures,
                       "comma-separated quality measure names");
  c_ctrain->add_flag("--with-duration", ctrain_opts.with_duration,
                     "append the test-side duration measure");
  c_ctrain->add_option("--l2", ctrain_opts.l2, "l2 regularization strength");
  c_ctrain->add_option("--seed", ctrain_opts.seed, "recorded training seed");
  c_ctrain->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_ctrain->add_option("--out", ctrain_opts.out, "output weights file")->required();
  c_ctrain->callback([&] {
    std::vector<std::string> inputs = {ctrain_opts.scores, ctrain_opts.plan,
                                       ctrain_opts.store};
    if (!ctrain_opts.cohort.empty()) inputs.push_back(ctrain_opts.cohort);
    guard_outputs(inputs, {ctrain_opts.out});
    const osi::EmbeddingStore store = load_store(ctrain_opts.store);
    const osi::SplitPlan plan = osi::read_plan(ctrain_opts.plan);
    const std::vector<osi::ScoreRecord> records = osi::read_scores(ctrain_opts.scores);
    std::vector<std::string> names = ctrain_opts.measures.empty()
                                         ? osi::default_measure_names()
                                         : parse_measures(ctrain_opts.measures);
    if (ctrain_opts.with_duration) names.push_back(std::string(osi::kDurationMeasure));
    bool need_cohort = false;
    for (const std::string& name : names)
      if (osi::measure_needs_cohort(name)) need_cohort = true;
    osi::EmbeddingStore cohort_store;
    if (need_cohort) {
      if (ctrain_opts.cohort.empty())
        throw osi::ContractError("impostor measures need --cohort");
      cohort_store = load_store(ctrain_opts.cohort);
    }
    const osi::CohortSet cohort{&cohort_store, cohort_store.size()};
    const std::vector<std::vector<double>> quality =
        osi::quality_for_records(records, plan, store, cohort, names, threads);
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(records.size());
    labels.reserve(records.size());
    for (const osi::ScoreRecord& r : records) {
      scores.push_back(r.raw_score);
      labels.push_back(r.label == osi::TrialLabel::kInset ? 1 : 0);
    }
    osi::TrainConfig train_cfg;
    train_cfg.l2 = ctrain_opts.l2;
    train_cfg.seed = ctrain_opts.seed;
    const osi::CalibratorWeights weights =
        osi::calibrate_train(scores, quality, labels, names, train_cfg);
    osi::write_weights(weights, ctrain_opts.out);
    ordered_json cfg;
    cfg["scores"] = ctrain_opts.scores;
    cfg["plan"] = ctrain_opts.plan;
    cfg["store"] = ctrain_opts.store;
    if (!ctrain_opts.cohort.empty()) cfg["cohort"] = ctrain_opts.cohort;
    cfg["measures"] = names;
    cfg["l2"] = ctrain_opts.l2;
    cfg["seed"] = ctrain_opts.seed;
    osi::write_manifest(ctrain_opts.out, "calibrate-train", cfg, inputs);
    std::cerr << "trained calibrator in " << weights.iterations << " iterations\n";
  });

  // calibrate-apply
  auto* c_capply = app.add_subcommand("calibrate-apply", "apply calibration weights");
  struct {
    std::string scores, plan, store, cohort, weights, out;
  } capply_opts;
  c_capply->add_option("--scores", capply_opts.scores, "score file")->required();
  c_capply->add_option("--plan", capply_opts.plan, "split plan")->required();
  c_capply->add_option("--store", capply_opts.store, "embedding store")->required();
  c_capply->add_option("--cohort", capply_opts.cohort,
                       "cohort store (needed for impostor measures)");
  c_capply->add_option("--weights", capply_opts.weights, "weights file")->required();
  c_capply->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_capply->add_option("--out", capply_opts.out, "output score file")->required();
  c_capply->callback([&] {
    std::vector<std::string> inputs = {capply_opts.scores, capply_opts.plan,
                                       capply_opts.store, capply_opts.weights};
    if (!capply_opts.cohort.empty()) inputs.push_back(capply_opts.cohort);
    guard_outputs(inputs, {capply_opts.out});
    const osi::EmbeddingStore store = load_store(capply_opts.store);
    const osi::SplitPlan plan = osi::read_plan(capply_opts.plan);
    const std::vector<osi::ScoreRecord> records = osi::read_scores(capply_opts.scores);
    const osi::CalibratorWeights weights = osi::read_weights(capply_opts.weights);
    bool need_cohort = false;
    for (const std::string& name : weights.measure_names)
      if (osi::measure_needs_cohort(name)) need_cohort = true;
    osi::EmbeddingStore cohort_store;
    if (need_cohort) {
      if (capply_opts.cohort.empty())
        throw osi::ContractError("impostor measures need --cohort");
      cohort_store = load_store(capply_opts.cohort);
    }
    const osi::CohortSet cohort{&cohort_store, cohort_store.size()};
    const std::vector<osi::ScoreRecord> calibrated =
        osi::calibrate_run(records, plan, store, cohort, weights, threads);
    osi::write_scores(calibrated, capply_opts.out);
    ordered_json cfg;
    cfg["scores"] = capply_opts.scores;
    cfg["plan"] = capply_opts.plan;
    cfg["store"] = capply_opts.store;
    if (!capply_opts.cohort.empty()) cfg["cohort"] = capply_opts.cohort;
    cfg["weights"] = capply_opts.weights;
    osi::write_manifest(capply_opts.out, "calibrate-apply", cfg, inputs);
    std::cerr << "calibrated " << calibrated.size() << " trials\n";
  });

  // fuse
  auto* c_fuse = app.add_subcommand("fuse", "unweighted score fusion across systems");
  struct {
    std::vector<std::string> scores;
    std::vector<std::string> stores;
    std::string plan, trials, out;
  } fuse_opts;
  c_fuse->add_option("--scores", fuse_opts.scores,
                     "score file per system (s*-averaging route)");
  c_fuse->add_option("--store", fuse_opts.stores,
                     "embedding store per system (per-speaker rescoring route)");
  c_fuse->add_option("--plan", fuse_opts.plan, "shared split plan (rescoring route)");
  c_fuse->add_option("--trials", fuse_opts.trials, "trial list (rescoring route)");
  c_fuse->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_fuse->add_option("--out", fuse_opts.out, "output score file")->required();
  c_fuse->callback([&] {
    const bool rescore_route = !fuse_opts.stores.empty();
    std::vector<osi::ScoreRecord> fused;
    std::vector<std::string> inputs;
    ordered_json cfg;
    if (rescore_route) {
      if (!fuse_opts.scores.empty())
        throw osi::ContractError("pass either --scores files or --store files, not both");
      if (fuse_opts.stores.size() < 2 || fuse_opts.plan.empty() ||
          fuse_opts.trials.empty())
        throw osi::ContractError(
            "per-speaker fusion needs --plan, --trials, and at least two --store");
      inputs = fuse_opts.stores;
      inputs.push_back(fuse_opts.plan);
      inputs.push_back(fuse_opts.trials);
      guard_outputs(inputs, {fuse_opts.out});
      std::vector<osi::EmbeddingStore> stores;
      stores.reserve(fuse_opts.stores.size());
      for (const std::string& path : fuse_opts.stores) stores.push_back(load_store(path));
      std::vector<const osi::EmbeddingStore*> ptrs;
      for (const osi::EmbeddingStore& s : stores) ptrs.push_back(&s);
      const osi::SplitPlan plan = osi::read_plan(fuse_opts.plan);
      const std::vector<osi::Trial> trials = osi::read_trials(fuse_opts.trials);
      fused = osi::fuse_rescore(plan, ptrs, trials, threads);
      cfg["stores"] = fuse_opts.stores;
      cfg["plan"] = fuse_opts.plan;
      cfg["trials"] = fuse_opts.trials;
    } else {
      if (fuse_opts.scores.size() < 2)
        throw osi::ContractError("fusion needs at least two --scores files");
      inputs = fuse_opts.scores;
      guard_outputs(inputs, {fuse_opts.out});
      std::vector<std::vector<osi::ScoreRecord>> systems;
      systems.reserve(fuse_opts.scores.size());
      for (const std::string& path : fuse_opts.scores)
        systems.push_back(osi::read_scores(path));
      fused = osi::fuse(systems);
      cfg["scores"] = fuse_opts.scores;
    }
    osi::write_scores(fused, fuse_opts.out);
    osi::write_manifest(fuse_opts.out, "fuse", cfg, inputs);
    std::cerr << "fused " << (rescore_route ? fuse_opts.stores.size()
                                            : fuse_opts.scores.size())
              << " systems over " << fused.size() << " trials\n";
  });

  // eval
  auto* c_eval = app.add_subcommand("eval", "operating-point metrics for a score file");
  struct {
    std::string scores, report, det;
    std::vector<std::string> far_levels, frr_levels;
    bool use_transformed = false;
    std::int64_t max_det_points = -1;
  } eval_opts;
  c_eval->add_option("--scores", eval_opts.scores, "score file")->required();
  c_eval->add_flag("--use-transformed", eval_opts.use_transformed,
                   "evaluate transformed scores instead of raw");
  c_eval->add_option("--far", eval_opts.far_levels, "report FRR at these FAR levels");
  c_eval->add_option("--frr", eval_opts.frr_levels, "report FAR at these FRR levels");
  c_eval->add_option("--report", eval_opts.report, "output report JSON")->required();
  c_eval->add_option("--det", eval_opts.det, "output DET curve CSV");
  c_eval->add_option("--max-det-points", eval_opts.max_det_points,
                     "downsample the DET curve to this many points");
  c_eval->callback([&] {
    std::vector<std::string> outputs = {eval_opts.report};
    if (!eval_opts.det.empty()) outputs.push_back(eval_opts.det);
    guard_outputs({eval_opts.scores}, outputs);
    if (eval_opts.far_levels.empty()) eval_opts.far_levels = {"0.005"};
    if (eval_opts.frr_levels.empty()) eval_opts.frr_levels = {"0.05"};
    const std::vector<osi::ScoreRecord> records = osi::read_scores(eval_opts.scores);
    const osi::ScorePartition p = osi::partition(records, eval_opts.use_transformed);

    ordered_json report;
    report["eer"] = osi::eer(p);
    ordered_json frr_at_far = ordered_json::object();
    for (const std::string& level : eval_opts.far_levels)
      frr_at_far[level] = osi::rate_at(p, osi::FixedRate::kFar, parse_level(level, "--far"));
    report["frr_at_far"] = std::move(frr_at_far);
    ordered_json far_at_frr = ordered_json::object();
    for (const std::string& level : eval_opts.frr_levels)
      far_at_frr[level] = osi::rate_at(p, osi::FixedRate::kFrr, parse_level(level, "--frr"));
    report["far_at_frr"] = std::move(far_at_frr);
    report["n_target"] = p.targets.size();
    report["n_nontarget"] = p.nontargets.size();
    {
      std::ofstream out(eval_opts.report, std::ios::binary | std::ios::trunc);
      if (!out) throw osi::ContractError("cannot write file: " + eval_opts.report);
      out << report.dump(2) << "\n";
    }
    ordered_json cfg;
    cfg["scores"] = eval_opts.scores;
    cfg["use_transformed"] = eval_opts.use_transformed;
    cfg["far"] = eval_opts.far_levels;
    cfg["frr"] = eval_opts.frr_levels;
    osi::write_manifest(eval_opts.report, "eval", cfg, {eval_opts.scores});
    if (!eval_opts.det.empty()) {
      std::optional<std::size_t> cap;
      if (eval_opts.max_det_points >= 0)
        cap = static_cast<std::size_t>(eval_opts.max_det_points);
      osi::write_det_csv(osi::det_curve(p, cap), eval_opts.det);
      osi::write_manifest(eval_opts.det, "eval", cfg, {eval_opts.scores});
    }
    std::cerr << "eer " << osi::format_double(report["eer"].get<double>()) << " over "
              << p.targets.size() << " target / " << p.nontargets.size()
              << " nontarget trials\n";
  });

  // sweep
  auto* c_sweep = app.add_subcommand(
      "sweep", "full pipeline over several watchlist sizes on one synthetic population");
  SynthFlags sweep_flags;
  struct {
    std::string sizes, out;
    std::int64_t max_per_label = -1;
    double far_level = 0.005;
    double frr_level = 0.05;
  } sweep_opts;
  sweep_flags.attach(c_sweep);
  c_sweep->add_option("--sizes", sweep_opts.sizes, "comma-separated watchlist sizes")
      ->required();
  c_sweep->add_option("--max-trials-per-label", sweep_opts.max_per_label,
                      "sub-sample each label to this many trials");
  c_sweep->add_option("--far", sweep_opts.far_level, "FAR level for the FRR column");
  c_sweep->add_option("--frr", sweep_opts.frr_level, "FRR level for the FAR column");
  c_sweep->add_option("--threads", threads, "worker thread count (0 = auto)");
  c_sweep->add_option("--out", sweep_opts.out, "output CSV path")->required();
  c_sweep->callback([&] {
    osi::SweepSettings settings;
    if (sweep_opts.max_per_label >= 0)
      settings.max_trials_per_label = static_cast<std::size_t>(sweep_opts.max_per_label);
    settings.far_level = sweep_opts.far_level;
    settings.frr_level = sweep_opts.frr_level;
    settings.threads = threads;
    const std::vector<osi::SweepRow> rows =
        osi::sweep(sweep_flags.config(), parse_sizes(sweep_opts.sizes), settings);
    osi::write_sweep_csv(rows, sweep_opts.out);
    ordered_json cfg = sweep_flags.manifest_config();
    cfg["sizes"] = sweep_opts.sizes;
    if (settings.max_trials_per_label)
      cfg["max_trials_per_label"] = *settings.max_trials_per_label;
    cfg["far"] = sweep_opts.far_level;
    cfg["frr"] = sweep_opts.frr_level;
    osi::write_manifest(sweep_opts.out, "sweep", cfg, {});
    std::cerr << "swept " << rows.size() << " watchlist sizes\n";
  });

  // histogram
  auto* c_hist = app.add_subcommand("histogram", "score histogram export");
  struct {
    std::string scores, label = "all", out;
    bool use_transformed = false;
    std::size_t bins = 0;
    double lo = 0.0, hi = 0.0;
  } hist_opts;
  c_hist->add_option("--scores", hist_opts.scores, "score file")->required();
  c_hist->add_flag("--use-transformed", hist_opts.use_transformed,
                   "bin transformed scores instead of raw");
  c_hist->add_option("--label", hist_opts.label, "which trials: inset|oos|all");
  c_hist->add_option("--bins", hist_opts.bins, "bin count")->required();
  c_hist->add_option("--lo", hist_opts.lo, "range lower bound")->required();
  c_hist->add_option("--hi", hist_opts.hi, "range upper bound")->required();
  c_hist->add_option("--out", hist_opts.out, "output CSV path")->required();
  c_hist->callback([&] {
    guard_outputs({hist_opts.scores}, {hist_opts.out});
    if (hist_opts.label != "all" && hist_opts.label != "inset" && hist_opts.label != "oos")
      throw osi::ContractError("bad --label '" + hist_opts.label +
                               "' (expected inset, oos, or all)");
    const std::vector<osi::ScoreRecord> records = osi::read_scores(hist_opts.scores);
    std::vector<double> scores;
    for (const osi::ScoreRecord& r : records) {
      if (hist_opts.label == "inset" && r.label != osi::TrialLabel::kInset) continue;
      if (hist_opts.label == "oos" && r.label != osi::TrialLabel::kOos) continue;
      if (hist_opts.use_transformed && !r.transformed_score)
        throw osi::ContractError("record for '" + r.test_recording +
                                 "' lacks transformed_score");
      scores.push_back(hist_opts.use_transformed ? *r.transformed_score : r.raw_score);
    }
    const osi::Histogram h =
        osi::histogram(scores, hist_opts.bins, hist_opts.lo, hist_opts.hi);
    osi::write_histogram_csv(h, hist_opts.out);
    ordered_json cfg;
    cfg["scores"] = hist_opts.scores;
    cfg["use_transformed"] = hist_opts.use_transformed;
    cfg["label"] = hist_opts.label;
    cfg["bins"] = hist_opts.bins;
    cfg["lo"] = hist_opts.lo;
    cfg["hi"] = hist_opts.hi;
    osi::write_manifest(hist_opts.out, "histogram", cfg, {hist_opts.scores});
    std::cerr << "binned " << scores.size() << " scores into " << hist_opts.bins
              << " bins\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends: text to stdout, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // usage text to stderr
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const osi::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
