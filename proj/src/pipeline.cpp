#include "facetsteer/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "facetsteer/activations.hpp"
#include "facetsteer/checksum.hpp"
#include "facetsteer/corpus.hpp"
#include "facetsteer/eval.hpp"
#include "facetsteer/seed.hpp"

namespace facetsteer {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

enum Stream : std::uint64_t { kCorpus = 1, kClassifier, kActs, kSae, kProbe, kCv, kSteer, kEval };

const std::vector<std::string> kDefaultQueries = {
    "writing advice",
    "How do I stay calm before a big exam?",
    "Help me plan a party for the whole group",
    "I keep breaking promises to my roommate",
    "Tell me a story you would imagine on a rainy day",
    "what is the weather like",
};

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view section) {
  if (!j.is_object()) throw ConfigError(fmt::format("config section \"{}\" must be an object", section));
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(fmt::format("unknown config key \"{}{}{}\"", section, section.empty() ? "" : ".", key));
}

const json& section(const json& j, const char* name) {
  static const json empty = json::object();
  const auto it = j.find(name);
  return it == j.end() ? empty : *it;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, std::string_view sec) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("config key \"{}.{}\" has the wrong type", sec, key));
  }
}

std::optional<fs::path> path_or(const json& j, const char* key, const fs::path& base, std::string_view sec) {
  if (!j.contains(key)) return std::nullopt;
  fs::path p = get_or<std::string>(j, key, "", sec);
  return p.is_relative() ? base / p : p;
}

// Injects the stage seed unless the section sets one itself.
json with_seed(const json& j, std::uint64_t seed) {
  json out = j;
  if (!out.contains("seed")) out["seed"] = seed;
  return out;
}

FacetId config_facet(const std::string& name, std::string_view key) {
  const auto f = find_facet(name);
  if (!f) throw ConfigError(fmt::format("config key \"{}\": unknown facet \"{}\"", key, name));
  return *f;
}

// ---------------------------------------------------------------------------

class Stage {
 public:
  Stage(const PipelineConfig& cfg, RunManifest& manifest) : cfg_(cfg), manifest_(manifest) {}

  const PipelineConfig& cfg() const { return cfg_; }
  fs::path out(const std::string& rel) const { return cfg_.output_dir / rel; }

  fs::path require(const std::string& rel, std::string_view producer) const {
    const fs::path p = out(rel);
    if (!fs::exists(p)) throw IoError(fmt::format("missing input {}; run \"{}\" first", p.string(), producer));
    return p;
  }

  void write_text(const std::string& rel, const std::string& content) {
    const fs::path p = out(rel);
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << content;
    f.close();
    if (!f) throw IoError("write failed: " + p.string());
    record(rel);
  }

  void write_json(const std::string& rel, const ojson& j) { write_text(rel, j.dump(2) + "\n"); }

  void record(const std::string& rel) {
    const fs::path p = out(rel);
    std::lock_guard lock(mu_);
    std::erase_if(manifest_.artifacts, [&](const ManifestEntry& e) { return e.path == rel; });
    manifest_.artifacts.push_back({rel, sha256_file(p), fs::file_size(p)});
  }

  std::vector<FacetId> facets() const {
    if (!cfg_.cvtrain.facets.empty()) return cfg_.cvtrain.facets;
    return {all_facets().begin(), all_facets().end()};
  }

  std::uint64_t seed(Stream s) const { return derive_seed(cfg_.seed, s); }

 private:
  const PipelineConfig& cfg_;
  RunManifest& manifest_;
  std::mutex mu_;
};

std::string mask_path(FacetId f) { return "masks/" + f.slug() + ".json"; }
std::string cv_path(FacetId f) { return "cvs/" + f.slug() + ".json"; }

std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs fn(i) for i in [0, n) on `workers` threads; rethrows the failure with
// the lowest index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < worker_count(workers, n); ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

FacetCorpus load_stage_corpus(const Stage& st) { return load_corpus(st.require("corpus.jsonl", "corpus-gen")); }
ActivationSet load_stage_acts(const Stage& st) {
  return load_activations(st.require("activations.fsta", "acts-synth"));
}
SaeModel load_stage_sae(const Stage& st) { return load_sae(st.require("sae.fsts", "sae-train")); }

std::optional<PlantedGroundTruth> load_planted(const Stage& st) {
  const fs::path p = st.out("planted.json");
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream in(p);
  return PlantedGroundTruth::from_json(json::parse(in));
}

CvBank load_bank(const Stage& st) {
  CvBank bank;
  for (FacetId f : st.facets()) bank.emplace(f, import_cv(st.require(cv_path(f), "cv-train")));
  return bank;
}

// ---------------------------------------------------------------------------

void corpus_gen(Stage& st) {
  const auto& c = st.cfg().corpus;
  FacetCorpus corpus = c.import_path ? load_corpus(*c.import_path) : generate_synthetic_corpus(st.seed(kCorpus), c.per_facet);
  st.write_text("corpus.jsonl", corpus_to_jsonl(corpus));
}

void corpus_validate(Stage& st) {
  const FacetCorpus corpus = load_stage_corpus(st);
  st.write_json("validation.json", validate_corpus(corpus).to_json());
  if (!st.cfg().corpus.leakage) return;
  const auto& cc = st.cfg().corpus.classifier;
  const LeakageClassifier clf = train_leakage_classifier(corpus, cc);
  const CorpusSplit split = split_corpus(corpus, cc.train_ratio, cc.seed);
  st.write_json("leakage_classifier.json", clf.to_json());
  st.write_json("leakage_report.json", evaluate_leakage(clf, split.held_out).to_json());
}

void acts_synth(Stage& st) {
  const auto& a = st.cfg().activations;
  if (a.import_path) {
    const ActivationSet acts = load_activations(*a.import_path);
    persist_activations(acts, st.out("activations.fsta"));
    st.record("activations.fsta");
    return;
  }
  const FacetCorpus corpus = load_stage_corpus(st);
  const PlantedGroundTruth gt = make_planted_ground_truth(a.d_model, a.sigma_noise, a.signal_scale, st.seed(kActs));
  const ActivationSet acts = synthesize_activations(corpus, gt, gt.seed, a.layer, a.model_tag);
  persist_activations(acts, st.out("activations.fsta"));
  st.record("activations.fsta");
  st.write_json("planted.json", gt.to_json());
}

void sae_train(Stage& st) {
  const ActivationSet acts = load_stage_acts(st);
  SaeConfig sc = st.cfg().sae;
  if (sc.d_model != acts.d_model) {
    if (!section(st.cfg().raw, "sae").contains("d_latent")) sc.d_latent = 4 * acts.d_model;
    sc.d_model = acts.d_model;
  }
  const SaeModel sae = train_sae(acts, sc);
  save_sae(sae, st.out("sae.fsts"));
  st.record("sae.fsts");
  ojson j;
  j["metrics"] = sae_metrics(sae, acts).to_json();
  j["loss_trace"] = sae.loss_trace;
  j["loss_monotone"] = sae.loss_monotone;
  j["checksum"] = sae_checksum(sae);
  st.write_json("sae_metrics.json", j);
}

void mask_build(Stage& st) {
  const ActivationSet acts = load_stage_acts(st);
  const SaeModel sae = load_stage_sae(st);
  const auto facets = st.facets();
  const auto& fc = st.cfg().featsel;
  std::vector<FeatureMask> masks(facets.size());
  parallel_for(facets.size(), st.cfg().cvtrain.workers, [&](std::size_t i) {
    const FacetCodes codes = encode_facet(sae, acts, facets[i]);
    ProbeConfig pc = fc.probe;
    pc.seed = derive_seed(pc.seed, facets[i].ordinal());
    masks[i] = select_features(codes.codes, codes.labels, fc.d_steer, pc);
  });
  for (std::size_t i = 0; i < facets.size(); ++i) st.write_json(mask_path(facets[i]), masks[i].to_json());
}

void cv_train(Stage& st) {
  const ActivationSet acts = load_stage_acts(st);
  const SaeModel sae = load_stage_sae(st);
  const auto planted = load_planted(st);
  const auto facets = st.facets();
  const auto& cc = st.cfg().cvtrain;

  std::vector<ControlVector> with_cl(facets.size()), without_cl(facets.size());
  parallel_for(facets.size(), cc.workers, [&](std::size_t i) {
    const FeatureMask mask = FeatureMask::load(st.require(mask_path(facets[i]), "mask-build"));
    TrainOptions opt = cc.train;
    opt.seed = derive_seed(opt.seed, facets[i].ordinal());
    with_cl[i] = train_cv(sae, acts, facets[i], mask, cc.loss, opt);
    if (cc.ablation) {
      LossConfig no_ce = cc.loss;
      no_ce.use_ce = false;
      without_cl[i] = train_cv(sae, acts, facets[i], mask, no_ce, opt);
    }
  });

  std::string summary =
      "facet,d_steer,initial_total,final_total,heldout_pos_init,heldout_pos_final,heldout_neg_init,heldout_neg_final,"
      "cos_planted\n";
  std::string ablation = "facet,condition,pos_init,pos_final,neg_init,neg_final\n";
  struct Mean {
    double pos_init = 0, pos_final = 0, neg_init = 0, neg_final = 0;
  } mean_with, mean_without;
  auto add = [&](Mean& m, const TrainingMeta& t) {
    const double n = static_cast<double>(facets.size());
    m.pos_init += t.heldout_initial.pos / n;
    m.pos_final += t.heldout_final.pos / n;
    m.neg_init += t.heldout_initial.neg / n;
    m.neg_final += t.heldout_final.neg / n;
  };
  auto ablation_row = [&](FacetId f, const char* cond, const TrainingMeta& t) {
    ablation += fmt::format("{},{},{:.6g},{:.6g},{:.6g},{:.6g}\n", f.name(), cond, t.heldout_initial.pos,
                            t.heldout_final.pos, t.heldout_initial.neg, t.heldout_final.neg);
  };
  for (std::size_t i = 0; i < facets.size(); ++i) {
    const auto& cv = with_cl[i];
    st.write_json(cv_path(facets[i]), cv_to_json(cv));
    const auto& m = cv.meta;
    std::string cos;
    if (planted && cv.decoded.norm() > 0.0)
      cos = fmt::format("{:.6g}", cv.decoded.normalized().dot(planted->direction(facets[i])));
    summary += fmt::format("{},{},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g},{:.6g},{}\n", facets[i].name(), cv.mask.d_steer(),
                           m.initial_loss.total, m.final_loss.total, m.heldout_initial.pos, m.heldout_final.pos,
                           m.heldout_initial.neg, m.heldout_final.neg, cos);
    add(mean_with, m);
    ablation_row(facets[i], "with_cl", m);
    if (cc.ablation) {
      add(mean_without, without_cl[i].meta);
      ablation_row(facets[i], "without_cl", without_cl[i].meta);
    }
  }
  st.write_text("cv_summary.csv", summary);
  if (cc.ablation) {
    st.write_text("ablation.csv", ablation);
    auto mean_json = [](const Mean& m) {
      return ojson{{"pos_init", m.pos_init}, {"pos_final", m.pos_final}, {"neg_init", m.neg_init},
                   {"neg_final", m.neg_final}};
    };
    st.write_json("ablation_summary.json", {{"facets", facets.size()},
                                            {"with_cl", mean_json(mean_with)},
                                            {"without_cl", mean_json(mean_without)}});
  }
}

ActivationSet vector_bank(const std::vector<std::pair<FacetId, Eigen::VectorXd>>& vectors, const std::string& prefix,
                          int layer, const std::string& model_tag) {
  ActivationSet bank;
  bank.layer = layer;
  bank.model_tag = model_tag;
  for (const auto& [f, v] : vectors) {
    ActivationRecord r;
    r.item_id = prefix + f.slug();
    r.facet = f;
    r.polarity = Polarity::Positive;
    r.layer = layer;
    r.model_tag = model_tag;
    for (Eigen::Index j = 0; j < v.size(); ++j) r.hidden.push_back(static_cast<float>(v[j]));
    bank.d_model = static_cast<std::size_t>(v.size());
    bank.records.push_back(std::move(r));
  }
  return bank;
}

void cv_export(Stage& st) {
  const CvBank bank = load_bank(st);
  std::vector<std::pair<FacetId, Eigen::VectorXd>> vectors;
  for (const auto& [f, cv] : bank) vectors.emplace_back(f, cv.decoded);
  const auto& any = bank.begin()->second;
  persist_activations(vector_bank(vectors, "cv-", any.layer, any.model_tag), st.out("cv_bank.fsta"));
  st.record("cv_bank.fsta");
}

std::vector<std::pair<FacetId, Eigen::VectorXd>> caa_vectors(const ActivationSet& acts,
                                                             const std::vector<FacetId>& facets) {
  std::vector<std::pair<FacetId, Eigen::VectorXd>> out;
  for (FacetId f : facets) out.emplace_back(f, caa_vector(acts, f));
  return out;
}

void caa(Stage& st) {
  const ActivationSet acts = load_stage_acts(st);
  persist_activations(vector_bank(caa_vectors(acts, st.facets()), "caa-", acts.layer, acts.model_tag),
                      st.out("caa_bank.fsta"));
  st.record("caa_bank.fsta");
}

// Toy whose five readout rows point along each dimension's mean unit CAA
// direction; logit shifts are reported relative to the zero input.
struct PersonaToy {
  ToyModel model;
  Eigen::VectorXd zero_logits;
  std::array<Eigen::VectorXd, 5> directions;
  int layer = 0;
};

PersonaToy persona_toy(const ActivationSet& acts, const SteerStage& s, std::uint64_t seed) {
  PersonaToy t;
  std::vector<Eigen::VectorXd> dirs;
  for (Dimension d : kDimensions) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model));
    for (FacetId f : all_facets())
      if (f.dimension == d) {
        const Eigen::VectorXd v = caa_vector(acts, f);
        if (v.norm() > 0.0) sum += v.normalized();
      }
    if (!(sum.norm() > 0.0)) throw NumericError(fmt::format("no usable CAA direction for {}", dimension_name(d)));
    t.directions[static_cast<std::size_t>(d)] = sum.normalized();
    dirs.push_back(sum.normalized());
  }
  t.model = make_aligned_toy(dirs, s.n_layers, seed, s.block_gain);
  t.layer = s.layer.value_or(t.model.default_layer());
  if (t.layer < 0 || t.layer >= s.n_layers)
    throw ConfigError(fmt::format("steering.layer {} outside 0..{}", t.layer, s.n_layers - 1));
  t.zero_logits = run_toy(t.model, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model))).logits;
  return t;
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

InjectionPlan steer_template(const Stage& st, SteerMode mode, const PersonaToy& toy, const ActivationSet& acts) {
  const auto& s = st.cfg().steering;
  if (mode == SteerMode::Sae) {
    const ControlVector cv = import_cv(st.require(cv_path(s.facet), "cv-train"));
    return single_vector_plan(mode, cv.decoded, 1.0, toy.layer, s.n_layers, s.facet);
  }
  return single_vector_plan(mode, caa_vector(acts, s.facet), 1.0, toy.layer, s.n_layers, s.facet);
}

void steer(Stage& st) {
  const auto& s = st.cfg().steering;
  const ActivationSet acts = load_stage_acts(st);
  const PersonaToy toy = persona_toy(acts, s, st.seed(kSteer));
  const InjectionPlan plan = scale_plan(steer_template(st, s.mode, toy, acts), s.alpha);
  const Eigen::VectorXd h0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model));
  const ToyRun base = run_toy(toy.model, h0);
  const ToyRun run = run_toy(toy.model, h0, plan);
  ojson j;
  j["facet"] = std::string(s.facet.name());
  j["mode"] = std::string(steer_mode_name(s.mode));
  j["alpha"] = s.alpha;
  j["layer"] = toy.layer;
  j["toy"] = toy_to_json(toy.model);
  j["on_target"] = std::string(dimension_name(s.facet.dimension));
  j["base_logits"] = to_vec(base.logits);
  j["steered_logits"] = to_vec(run.logits);
  j["logit_shift"] = to_vec(run.logits - base.logits);
  j["final_shift_norm"] = (run.final_hidden - base.final_hidden).norm();
  std::vector<double> layer_shift;
  for (std::size_t l = 0; l < run.trace.size(); ++l) layer_shift.push_back((run.trace[l] - base.trace[l]).norm());
  j["layer_shift_norms"] = layer_shift;
  st.write_json("steer.json", j);
}

void sweep(Stage& st) {
  const auto& s = st.cfg().steering;
  const ActivationSet acts = load_stage_acts(st);
  const PersonaToy toy = persona_toy(acts, s, st.seed(kSteer));
  const auto target = static_cast<Eigen::Index>(s.facet.dimension);
  const Eigen::VectorXd h0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model));
  const ToyRun base = run_toy(toy.model, h0);
  const SweepEval eval = [&](const ToyModel& model, const InjectionPlan& plan) -> Metrics {
    const ToyRun run = run_toy(model, h0, plan);
    double off = 0.0, injected = 0.0;
    for (Eigen::Index k = 0; k < run.logits.size(); ++k)
      if (k != target) off += run.logits[k] / static_cast<double>(run.logits.size() - 1);
    for (const auto& e : plan.entries) injected += std::abs(e.alpha) * e.vector.norm();
    return {{"on_target_logit", run.logits[target]},
            {"off_target_mean_logit", off},
            {"injection_norm", injected},
            {"final_shift_norm", (run.final_hidden - base.final_hidden).norm()}};
  };
  for (SteerMode mode : {SteerMode::Sae, SteerMode::Caa}) {
    const auto rows = alpha_sweep(toy.model, eval, s.alphas, steer_template(st, mode, toy, acts));
    st.write_text(fmt::format("sweep_{}.csv", steer_mode_name(mode)), sweep_to_csv(rows));
  }
}

std::unique_ptr<FacetScorer> make_scorer(const RouteStage& r) {
  if (r.scorer == "chat")
    return std::make_unique<ChatScorer>(std::make_shared<HttpChatClient>(*r.chat), r.chat->max_retries,
                                        r.chat->backoff_initial_s);
  return std::make_unique<KeywordScorer>();
}

void route(Stage& st) {
  const auto& r = st.cfg().routing;
  const CvBank bank = load_bank(st);
  const ActivationSet acts = load_stage_acts(st);
  const PersonaToy toy = persona_toy(acts, st.cfg().steering, st.seed(kSteer));
  const auto scorer = make_scorer(r);
  const auto scores = score_batch(*scorer, r.queries, r.max_in_flight);
  const Eigen::VectorXd h0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model));
  const ToyRun base = run_toy(toy.model, h0);
  std::string out;
  for (std::size_t i = 0; i < r.queries.size(); ++i) {
    const auto selected = select_cvs(scores[i], r.policy, available_facets(bank));
    const InjectionPlan plan = compose_injection(selected, bank, toy.layer, {}, r.policy.alpha_default);
    const ToyRun run = run_toy(toy.model, h0, plan);
    ojson j;
    j["query"] = r.queries[i];
    j["scorer"] = scores[i].scorer_tag;
    ojson nonzero = ojson::object();
    for (FacetId f : all_facets())
      if (scores[i][f] > 0.0) nonzero[std::string(f.name())] = scores[i][f];
    j["scores"] = nonzero;
    std::vector<std::string> names;
    for (FacetId f : selected) names.emplace_back(f.name());
    j["selected"] = names;
    j["plan_entries"] = plan.entries.size();
    j["logit_shift"] = to_vec(run.logits - base.logits);
    j["unsteered_identical"] = run.final_hidden == base.final_hidden && run.logits == base.logits;
    out += j.dump() + "\n";
  }
  st.write_text("routing.jsonl", out);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void eval(Stage& st) {
  const auto& e = st.cfg().eval;
  const CvBank bank = load_bank(st);
  const ActivationSet acts = load_stage_acts(st);
  const PersonaToy toy = persona_toy(acts, st.cfg().steering, st.seed(kSteer));
  const QuestionSet questions = e.questions_path ? load_questions(*e.questions_path) : generate_questions(st.seed(kEval));
  const auto roster = make_roster(derive_seed(st.seed(kEval), 1), e.roster_size);
  st.write_text("questions.jsonl", questions_to_jsonl(questions));
  st.write_json("truth.json", truth_to_json(truth_of(roster)));

  const auto scorer = make_scorer(st.cfg().routing);
  std::vector<std::string> texts;
  for (const auto& q : questions.questions) texts.push_back(q.text);
  const auto scores = score_batch(*scorer, texts, st.cfg().routing.max_in_flight);
  std::vector<std::vector<FacetId>> routed;
  for (const auto& s : scores) routed.push_back(select_cvs(s, st.cfg().routing.policy, available_facets(bank)));

  const auto d = static_cast<Eigen::Index>(acts.d_model);
  std::vector<JudgeItem> steered_items, base_items;
  std::vector<ojson> transcript;
  for (std::size_t c = 0; c < roster.size(); ++c) {
    const auto& ch = roster[c];
    std::mt19937_64 rng(derive_seed(st.seed(kEval), 100 + c));
    std::normal_distribution<double> noise(0.0, e.character_noise);
    Eigen::VectorXd h0(d);
    for (Eigen::Index k = 0; k < d; ++k) h0[k] = noise(rng);
    for (Dimension dim : kDimensions) {
      const double sign = ch.truth[static_cast<std::size_t>(dim)] == Level::High ? 1.0 : -1.0;
      h0 += sign * e.persona_strength * toy.directions[static_cast<std::size_t>(dim)];
    }
    const ToyRun base = run_toy(toy.model, h0);
    std::map<FacetId, double> alpha_map;
    for (FacetId f : all_facets())
      alpha_map[f] = (ch.truth[static_cast<std::size_t>(f.dimension)] == Level::High ? 1.0 : -1.0) *
                     st.cfg().routing.policy.alpha_default;

    for (std::size_t qi = 0; qi < questions.questions.size(); ++qi) {
      const Question& q = questions.questions[qi];
      const auto k = static_cast<Eigen::Index>(q.dimension);
      const InjectionPlan plan = compose_injection(routed[qi], bank, toy.layer, alpha_map, 0.0);
      const ToyRun run = run_toy(toy.model, h0, plan);
      const double shift = (run.final_hidden - base.final_hidden).norm();
      const unsigned flags = shift > e.ooc_norm ? static_cast<unsigned>(Flag::OutOfCharacter) : 0u;
      const double steered_score = sigmoid(e.score_gain * (run.logits[k] - toy.zero_logits[k]));
      const double base_score = sigmoid(e.score_gain * (base.logits[k] - toy.zero_logits[k]));
      steered_items.push_back({&ch, &q, template_response(ch, q, steered_score, flags)});
      base_items.push_back({&ch, &q, template_response(ch, q, base_score)});
      std::vector<std::string> names;
      for (FacetId f : routed[qi]) names.emplace_back(f.name());
      transcript.push_back({{"character_id", ch.id},
                            {"question_id", q.id},
                            {"routed", names},
                            {"steering_shift_norm", shift},
                            {"response", steered_items.back().response},
                            {"unsteered_response", base_items.back().response}});
    }
  }

  std::unique_ptr<Judge> judge;
  if (e.judge == "chat")
    judge = std::make_unique<ChatJudge>(std::make_shared<HttpChatClient>(*e.chat), e.chat->max_retries,
                                        e.chat->backoff_initial_s);
  else
    judge = std::make_unique<StubJudge>();
  const auto steered = judge_batch(*judge, steered_items, e.max_in_flight);
  const auto unsteered = judge_batch(*judge, base_items, e.max_in_flight);

  std::string lines;
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    transcript[i]["judged"] = steered[i].to_json();
    lines += transcript[i].dump() + "\n";
  }
  st.write_text("transcripts.jsonl", lines);

  const TruthTable truth = truth_of(roster);
  const MetricsReport rs = compute_metrics(steered, truth, e.threshold);
  const MetricsReport ru = compute_metrics(unsteered, truth, e.threshold);
  st.write_json("eval_report.json", {{"units", std::string(kMetricsUnitsNote)},
                                     {"judge", e.judge},
                                     {"steered", rs.to_json()},
                                     {"unsteered", ru.to_json()}});
  st.write_text("eval_summary.csv", rs.to_csv());
  st.write_text("eval_unsteered.csv", ru.to_csv());
}

using StageFn = void (*)(Stage&);
StageFn stage_fn(std::string_view name) {
  static const std::pair<std::string_view, StageFn> table[] = {
      {"corpus-gen", corpus_gen}, {"corpus-validate", corpus_validate}, {"acts-synth", acts_synth},
      {"sae-train", sae_train},   {"mask-build", mask_build},           {"cv-train", cv_train},
      {"cv-export", cv_export},   {"caa", caa},                         {"steer", steer},
      {"sweep", sweep},           {"route", route},                     {"eval", eval}};
  for (const auto& [n, fn] : table)
    if (n == name) return fn;
  return nullptr;
}

void write_manifest(const PipelineConfig& cfg, const RunManifest& m, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write manifest " + path.string());
  f << m.to_json(cfg).dump(2) << "\n";
}

void run_stage(std::string_view name, const PipelineConfig& cfg, RunManifest& manifest) {
  RunManifest own{std::string(name), {}};
  Stage st(cfg, own);
  try {
    stage_fn(name)(st);
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(std::string(name), e.kind(), fmt::format("stage \"{}\" failed: {}", name, e.what()));
  } catch (const std::exception& e) {
    throw StageError(std::string(name), "error", fmt::format("stage \"{}\" failed: {}", name, e.what()));
  }
  std::sort(own.artifacts.begin(), own.artifacts.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  write_manifest(cfg, own, cfg.output_dir / "manifests" / (std::string(name) + ".json"));
  for (auto& a : own.artifacts) {
    std::erase_if(manifest.artifacts, [&](const ManifestEntry& e) { return e.path == a.path; });
    manifest.artifacts.push_back(a);
  }
}

ChatClientConfig chat_config(const json& j, std::string_view sec) {
  if (!j.contains("chat"))
    throw ConfigError(fmt::format("config key \"{}.chat\" is required for the chat client", sec));
  return ChatClientConfig::from_json(j.at("chat"));
}

}  // namespace

// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  check_keys(j, {"version", "seed", "output_dir", "corpus", "activations", "sae", "featsel", "cvtrain", "steering",
                 "routing", "eval"},
             "");
  if (!j.contains("version")) throw ConfigError("missing config key \"version\"");
  if (!j.contains("output_dir")) throw ConfigError("missing config key \"output_dir\"");
  const int version = get_or<int>(j, "version", 0, "");
  if (version != kConfigVersion)
    throw ConfigError(fmt::format("unsupported config version {} (expected {})", version, kConfigVersion));

  PipelineConfig c;
  c.raw = j;
  c.seed = get_or<std::uint64_t>(j, "seed", 0, "");
  c.output_dir = get_or<std::string>(j, "output_dir", "", "");
  if (c.output_dir.is_relative()) c.output_dir = base_dir / c.output_dir;
  auto stage_seed = [&](Stream s) { return derive_seed(c.seed, s); };

  const json& co = section(j, "corpus");
  check_keys(co, {"per_facet", "import", "leakage", "classifier"}, "corpus");
  c.corpus.per_facet = get_or<std::size_t>(co, "per_facet", c.corpus.per_facet, "corpus");
  if (c.corpus.per_facet == 0) throw ConfigError("corpus.per_facet must be >= 1");
  c.corpus.import_path = path_or(co, "import", base_dir, "corpus");
  c.corpus.leakage = get_or<bool>(co, "leakage", c.corpus.leakage, "corpus");
  c.corpus.classifier = ClassifierConfig::from_json(with_seed(section(co, "classifier"), stage_seed(kClassifier)));

  const json& ac = section(j, "activations");
  check_keys(ac, {"d_model", "sigma_noise", "signal_scale", "layer", "model_tag", "import"}, "activations");
  auto& a = c.activations;
  a.d_model = get_or<std::size_t>(ac, "d_model", a.d_model, "activations");
  a.sigma_noise = get_or<double>(ac, "sigma_noise", a.sigma_noise, "activations");
  a.signal_scale = get_or<double>(ac, "signal_scale", a.signal_scale, "activations");
  a.layer = get_or<int>(ac, "layer", a.layer, "activations");
  a.model_tag = get_or<std::string>(ac, "model_tag", a.model_tag, "activations");
  a.import_path = path_or(ac, "import", base_dir, "activations");
  if (a.d_model < 8) throw ConfigError("activations.d_model must be >= 8");
  if (!(a.sigma_noise >= 0.0)) throw ConfigError("activations.sigma_noise must be >= 0");

  json sj = with_seed(section(j, "sae"), stage_seed(kSae));
  check_keys(sj, {"d_model", "d_latent", "l1_coeff", "learning_rate", "epochs", "batch_size", "seed"}, "sae");
  if (!sj.contains("d_model")) sj["d_model"] = a.d_model;
  c.sae = SaeConfig::from_json(sj);

  const json& fj = section(j, "featsel");
  check_keys(fj, {"d_steer", "probe"}, "featsel");
  c.featsel.d_steer = get_or<std::size_t>(fj, "d_steer", c.featsel.d_steer, "featsel");
  c.featsel.probe = ProbeConfig::from_json(with_seed(section(fj, "probe"), stage_seed(kProbe)));
  if (c.featsel.d_steer < 1 || c.featsel.d_steer > c.sae.d_latent)
    throw ConfigError(fmt::format("featsel.d_steer must be in 1..{}", c.sae.d_latent));

  const json& cj = section(j, "cvtrain");
  check_keys(cj, {"loss", "train", "facets", "ablation", "workers"}, "cvtrain");
  c.cvtrain.loss = LossConfig::from_json(section(cj, "loss"));
  c.cvtrain.train = TrainOptions::from_json(with_seed(section(cj, "train"), stage_seed(kCv)));
  for (const auto& name : get_or<std::vector<std::string>>(cj, "facets", {}, "cvtrain"))
    c.cvtrain.facets.push_back(config_facet(name, "cvtrain.facets"));
  c.cvtrain.ablation = get_or<bool>(cj, "ablation", c.cvtrain.ablation, "cvtrain");
  c.cvtrain.workers = get_or<std::size_t>(cj, "workers", c.cvtrain.workers, "cvtrain");

  const json& st = section(j, "steering");
  check_keys(st, {"n_layers", "block_gain", "layer", "mode", "facet", "alpha", "alphas"}, "steering");
  auto& s = c.steering;
  s.n_layers = get_or<int>(st, "n_layers", s.n_layers, "steering");
  s.block_gain = get_or<double>(st, "block_gain", s.block_gain, "steering");
  if (st.contains("layer")) s.layer = get_or<int>(st, "layer", 0, "steering");
  s.mode = parse_steer_mode(get_or<std::string>(st, "mode", "sae", "steering"));
  if (st.contains("facet")) s.facet = config_facet(get_or<std::string>(st, "facet", "", "steering"), "steering.facet");
  s.alpha = get_or<double>(st, "alpha", s.alpha, "steering");
  s.alphas = get_or<std::vector<double>>(st, "alphas", s.alphas, "steering");
  if (s.n_layers < 1) throw ConfigError("steering.n_layers must be >= 1");
  if (s.layer && (*s.layer < 0 || *s.layer >= s.n_layers))
    throw ConfigError(fmt::format("steering.layer must be in 0..{}", s.n_layers - 1));
  if (!c.cvtrain.facets.empty() &&
      std::find(c.cvtrain.facets.begin(), c.cvtrain.facets.end(), s.facet) == c.cvtrain.facets.end())
    throw ConfigError(fmt::format("steering.facet \"{}\" is not among cvtrain.facets", s.facet.name()));

  const json& rj = section(j, "routing");
  check_keys(rj, {"threshold", "per_dimension_top_k", "alpha_default", "scorer", "chat", "queries", "max_in_flight"},
             "routing");
  c.routing.policy = RoutingPolicy::from_json(rj);
  c.routing.scorer = get_or<std::string>(rj, "scorer", c.routing.scorer, "routing");
  if (c.routing.scorer != "keyword" && c.routing.scorer != "chat")
    throw ConfigError(fmt::format("routing.scorer \"{}\" is not keyword or chat", c.routing.scorer));
  if (c.routing.scorer == "chat") c.routing.chat = chat_config(rj, "routing");
  c.routing.queries = get_or<std::vector<std::string>>(rj, "queries", kDefaultQueries, "routing");
  c.routing.max_in_flight = get_or<std::size_t>(rj, "max_in_flight", c.routing.max_in_flight, "routing");

  const json& ej = section(j, "eval");
  check_keys(ej, {"threshold", "judge", "chat", "questions", "roster_size", "persona_strength", "character_noise",
                  "score_gain", "ooc_norm", "max_in_flight"},
             "eval");
  auto& e = c.eval;
  e.threshold = get_or<double>(ej, "threshold", e.threshold, "eval");
  e.judge = get_or<std::string>(ej, "judge", e.judge, "eval");
  if (e.judge != "stub" && e.judge != "chat") throw ConfigError(fmt::format("eval.judge \"{}\" is not stub or chat", e.judge));
  if (e.judge == "chat") e.chat = chat_config(ej, "eval");
  e.questions_path = path_or(ej, "questions", base_dir, "eval");
  e.roster_size = get_or<std::size_t>(ej, "roster_size", e.roster_size, "eval");
  e.persona_strength = get_or<double>(ej, "persona_strength", e.persona_strength, "eval");
  e.character_noise = get_or<double>(ej, "character_noise", e.character_noise, "eval");
  e.score_gain = get_or<double>(ej, "score_gain", e.score_gain, "eval");
  e.ooc_norm = get_or<double>(ej, "ooc_norm", e.ooc_norm, "eval");
  e.max_in_flight = get_or<std::size_t>(ej, "max_in_flight", e.max_in_flight, "eval");
  if (!(e.threshold > 0.0 && e.threshold < 1.0)) throw ConfigError("eval.threshold must be in (0,1)");
  if (e.roster_size == 0) throw ConfigError("eval.roster_size must be >= 1");
  if (!(e.character_noise >= 0.0)) throw ConfigError("eval.character_noise must be >= 0");
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  return from_json(j, path.parent_path());
}

bool is_command(std::string_view name) { return name == "pipeline" || stage_fn(name) != nullptr; }

ojson RunManifest::to_json(const PipelineConfig& cfg) const {
  ojson j;
  j["command"] = command;
  j["config_version"] = kConfigVersion;
  j["seed"] = cfg.seed;
  j["config"] = cfg.raw;
  ojson list = ojson::array();
  for (const auto& a : artifacts) list.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  j["artifacts"] = list;
  return j;
}

RunManifest run_command(std::string_view command, const PipelineConfig& cfg) {
  if (!is_command(command)) throw ConfigError(fmt::format("unknown command \"{}\"", command));
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError(fmt::format("cannot create output directory {}: {}", cfg.output_dir.string(), ec.message()));

  RunManifest manifest{std::string(command), {}};
  if (command == "pipeline") {
    for (auto stage : kPipelineStages) run_stage(stage, cfg, manifest);
    std::sort(manifest.artifacts.begin(), manifest.artifacts.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
    write_manifest(cfg, manifest, cfg.output_dir / "manifest.json");
  } else {
    run_stage(command, cfg, manifest);
  }
  return manifest;
}

}  // namespace facetsteer
