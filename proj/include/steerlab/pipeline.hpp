/*
 * Copyright 2026 The steerlab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef STEERLAB_PIPELINE_HPP
#define STEERLAB_PIPELINE_HPP

// Pipeline stages behind the `steerlab` commands.
//
// Every stage writes its artifacts atomically, then a stamp file
// (stamps/<stage>.json) holding the stage's config hash and a hash of each
// artifact. Downstream stages refuse to run when a stamp is missing, was
// produced under a different config, or no longer matches the files on
// disk. Each successful command appends one record to manifest.jsonl.

#include <chrono>
#include <fcntl.h>
#include <iostream>
#include <optional>
#include <unistd.h>

#include "attribution.hpp"
#include "config.hpp"
#include "contrast.hpp"
#include "corpus.hpp"
#include "evaluation.hpp"
#include "sae.hpp"
#include "steering.hpp"
#include "tensor_io.hpp"
#include "transformer.hpp"

namespace steerlab {

// Missing or stale upstream artifacts.
struct StageError : std::runtime_error {
	using std::runtime_error::runtime_error;
};

enum class Stage { corpus, model, acts, saes, features, sweep, baselines, attribute, decompose, demo, report };

struct StageInfo {
	Stage stage;
	const char *name;    // stamp name
	const char *command; // CLI command that produces it
};

inline constexpr StageInfo kStages[] = {
    {Stage::corpus, "corpus", "gen-corpus"},       {Stage::model, "model", "train-model"},
    {Stage::acts, "acts", "collect-acts"},         {Stage::saes, "saes", "train-saes"},
    {Stage::features, "features", "find-features"}, {Stage::sweep, "sweep", "sweep"},
    {Stage::baselines, "baselines", "baselines"},  {Stage::attribute, "attribute", "attribute"},
    {Stage::decompose, "decompose", "decompose"},  {Stage::demo, "demo", "demo"},
    {Stage::report, "report", "report"},
};

inline const StageInfo &stage_info(Stage s) {
	for (const auto &i : kStages)
		if (i.stage == s)
			return i;
	throw std::logic_error("unknown stage");
}

// Config key prefixes each stage's outputs depend on.
inline std::vector<std::string> stage_prefixes(Stage s) {
	std::vector<std::string> p{"seed", "corpus."};
	auto add = [&](std::initializer_list<const char *> xs) { p.insert(p.end(), xs.begin(), xs.end()); };
	switch (s) {
	case Stage::corpus:
		add({"eval.alpha"});
		break;
	case Stage::model:
		add({"model.", "train."});
		break;
	case Stage::acts:
		add({"model.", "train.", "acts."});
		break;
	case Stage::saes:
		add({"model.", "train.", "acts.", "sae."});
		break;
	case Stage::features:
	case Stage::attribute:
	case Stage::decompose:
		add({"model.", "train.", "acts.", "sae.", "contrast.", "attribution."});
		break;
	case Stage::sweep:
	case Stage::demo:
		add({"model.", "train.", "acts.", "sae.", "contrast.", "generate.", "steer.", "sweep.", "eval.", "demo."});
		break;
	case Stage::baselines:
		add({"model.", "train.", "generate.", "eval.", "baselines."});
		break;
	case Stage::report:
		add({"model.", "train.", "acts.", "sae.", "contrast.", "generate.", "steer.", "sweep.", "eval.", "baselines.",
		     "attribution."});
		break;
	}
	return p;
}

inline std::string hash_bytes(std::string_view bytes) {
	char buf[17];
	std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
	return buf;
}

// Exclusive lock on an output directory, released on destruction.
class OutputLock {
public:
	explicit OutputLock(const fs::path &dir) : path_(dir / ".lock") {
		fs::create_directories(dir);
		fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
		if (fd_ < 0)
			throw StageError("output directory " + dir.string() + " is locked by another run (" + path_.string() +
			                 "); remove the file if no steerlab process is running");
		const std::string pid = std::to_string(::getpid()) + "\n";
		[[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
	}
	OutputLock(const OutputLock &) = delete;
	OutputLock &operator=(const OutputLock &) = delete;
	~OutputLock() {
		if (fd_ >= 0) {
			::close(fd_);
			std::error_code ec;
			fs::remove(path_, ec);
		}
	}

private:
	fs::path path_;
	int fd_ = -1;
};

// An output directory plus the config a command runs under.
class Workspace {
public:
	Workspace(fs::path root, Config cfg, std::ostream *log = &std::clog)
	    : root_(std::move(root)), cfg_(std::move(cfg)), log_(log) {}

	const fs::path &root() const noexcept { return root_; }
	const Config &config() const noexcept { return cfg_; }
	fs::path path(const std::string &rel) const { return root_ / rel; }

	template <typename... Args>
	void info(const Args &...args) const {
		if (!log_)
			return;
		*log_ << "[steerlab] ";
		((*log_ << args), ...);
		*log_ << '\n';
		log_->flush();
	}

	std::string stage_hash(Stage s) const { return cfg_.hash(stage_prefixes(s)); }

	// Writes an artifact atomically and remembers it for the stamp.
	void write(const std::string &rel, std::string_view bytes) {
		write_file_atomic(path(rel), bytes);
		written_.emplace_back(rel, hash_bytes(bytes));
	}

	void write_tensor(const std::string &rel, TensorFile f, Stage s) {
		f.header["config_hash"] = stage_hash(s);
		write(rel, encode_tensor_file(f));
	}

	void write_json(const std::string &rel, Json j, Stage s) {
		j["config_hash"] = stage_hash(s);
		write(rel, j.dump(1) + "\n");
	}

	// Finishes a stage: writes its stamp (which lists the artifacts).
	void stamp(Stage s, Json measured = Json::object()) {
		Json art = Json::object();
		for (const auto &[p, h] : written_)
			art[p] = h;
		Json st{{"stage", stage_info(s).name}, {"config_hash", stage_hash(s)}, {"artifacts", art},
		        {"measured", std::move(measured)}};
		const std::string rel = std::string("stamps/") + stage_info(s).name + ".json";
		write_file_atomic(path(rel), st.dump(1) + "\n");
		written_.emplace_back(rel, hash_bytes(st.dump(1) + "\n"));
	}

	// Checks that stage `s` has run under the current config and that its
	// artifacts are intact. Returns the stamp.
	Json require(Stage s) const {
		const auto &info = stage_info(s);
		const fs::path p = path(std::string("stamps/") + info.name + ".json");
		if (!fs::exists(p))
			throw StageError(std::string("missing ") + info.name + " artifacts in " + root_.string() +
			                 "; run `steerlab " + info.command + "` first");
		const Json st = Json::parse(read_file(p));
		const std::string want = stage_hash(s);
		if (st.at("config_hash") != want)
			throw StageError(std::string("stale ") + info.name + " artifacts: produced with config hash " +
			                 st.at("config_hash").get<std::string>() + ", current config hashes to " + want +
			                 "; rerun `steerlab " + info.command + "`");
		for (const auto &[rel, h] : st.at("artifacts").items()) {
			const fs::path ap = path(rel);
			if (!fs::exists(ap))
				throw StageError("artifact " + rel + " is missing; rerun `steerlab " + std::string(info.command) +
				                 "`");
			if (hash_bytes(read_file(ap)) != h.get<std::string>())
				throw StageError("artifact " + rel + " changed since `steerlab " + std::string(info.command) +
				                 "` wrote it; rerun that command");
		}
		return st;
	}

	bool fresh(Stage s) const {
		try {
			require(s);
			return true;
		} catch (const StageError &) {
			return false;
		}
	}

	const std::vector<std::pair<std::string, std::string>> &written() const noexcept { return written_; }

	void append_manifest(const std::string &command, double wall_seconds, const Json &measured) const {
		Json upstream = Json::object();
		for (const auto &i : kStages) {
			const fs::path p = path(std::string("stamps/") + i.name + ".json");
			if (fs::exists(p))
				upstream[i.name] = Json::parse(read_file(p)).at("config_hash");
		}
		Json arts = Json::object();
		for (const auto &[p, h] : written_)
			arts[p] = h;
		Json rec{{"command", command},
		         {"config", cfg_.values()},
		         {"seed", cfg_.seed()},
		         {"stage_hashes", upstream},
		         {"artifacts", arts},
		         {"wall_seconds", wall_seconds},
		         {"measured", measured}};
		const fs::path mp = path("manifest.jsonl");
		std::ofstream out(mp, std::ios::app);
		if (!out)
			throw IoError("cannot append to " + mp.string());
		out << rec.dump() << '\n';
	}

private:
	fs::path root_;
	Config cfg_;
	std::ostream *log_;
	std::vector<std::pair<std::string, std::string>> written_;
};

// --- shared loaders ----------------------------------------------------------

inline CorpusGenerator make_generator(const Config &cfg) {
	return CorpusGenerator(cfg.corpus(), cfg.stage_seed("corpus"));
}

inline std::vector<Sentence> load_sentences(const Workspace &ws, const std::string &rel) {
	return sentences_from_jsonl(read_file(ws.path(rel)));
}

inline std::string pairs_file(int target, bool base_side) {
	return "corpus/pairs_" + std::to_string(target) + (base_side ? "_base" : "_target") + ".jsonl";
}

inline std::string sae_file(int layer) { return "saes/layer_" + std::to_string(layer) + ".stlb"; }
inline std::string acts_file(int layer) { return "acts/layer_" + std::to_string(layer) + ".stlb"; }
inline std::string heldout_acts_file(int layer) { return "acts/heldout_" + std::to_string(layer) + ".stlb"; }

inline ModelParams<float> load_model(const Workspace &ws) {
	return model_from_file<float>(load_tensor_file(ws.path("model/model.stlb")));
}

inline Sae<float> load_sae(const Workspace &ws, int layer) {
	return sae_from_file<float>(load_tensor_file(ws.path(sae_file(layer))));
}

inline LangClassifier load_classifier(const Workspace &ws) {
	return classifier_from_json(Json::parse(read_file(ws.path("corpus/classifier.json"))));
}

inline std::vector<ContrastResult> load_contrasts(const Workspace &ws, std::size_t m) {
	const Json j = Json::parse(read_file(ws.path("features/contrasts.json")));
	std::vector<ContrastResult> out;
	for (const auto &c : j.at("results"))
		out.push_back(contrast_from_json(c, m));
	return out;
}

inline const ContrastResult &find_contrast(std::span<const ContrastResult> cs, int layer, int target,
                                           ContrastMode mode) {
	for (const auto &c : cs)
		if (c.layer == layer && c.target == target && c.mode == mode)
			return c;
	throw StageError("no contrast for layer " + std::to_string(layer) + ", language " + std::to_string(target) +
	                 ", mode " + to_string(mode) + "; rerun `steerlab find-features`");
}

// Residual stream at `layer` for each sentence (rows = positions).
template <typename T>
std::vector<Matrix<T>> residuals_at(const ModelParams<T> &params, std::span<const Sentence> sentences, int layer) {
	std::vector<Matrix<T>> out;
	out.reserve(sentences.size());
	for (const auto &s : sentences)
		out.push_back(forward<T>(params, s.tokens, TraceOptions{true, false}).trace.resid_post.at(layer));
	return out;
}

inline std::string describe_token(const VocabSpec &v, int t) {
	switch (v.kind(t)) {
	case TokenKind::special:
		return t == kBos ? "<bos>" : t == kEos ? "<eos>" : "<pad>";
	case TokenKind::tag:
		return "<lang:" + std::to_string(*v.language_of(t)) + ">";
	case TokenKind::content:
		return "L" + std::to_string(*v.language_of(t)) + ".c" + std::to_string(*v.concept_of(t));
	case TokenKind::function:
		return "L" + std::to_string(*v.language_of(t)) + ".f" + std::to_string(t - v.function_token(*v.language_of(t), 0));
	}
	return "?";
}

inline std::string describe_tokens(const VocabSpec &v, std::span<const int> ts) {
	std::string out;
	for (int t : ts) {
		if (!out.empty())
			out += ' ';
		out += describe_token(v, t);
	}
	return out;
}

// --- stages ------------------------------------------------------------------

struct CommandResult {
	Json measured = Json::object();
};

inline CommandResult cmd_gen_corpus(Workspace &ws) {
	const Config &cfg = ws.config();
	const auto gen = make_generator(cfg);
	const int K = gen.config().languages;
	const int n_pairs = cfg.get<int>("corpus.pairs");

	ws.write_json("corpus/vocab.json",
	              Json{{"corpus", to_json(gen.config())},
	                   {"size", gen.vocab().size},
	                   {"tag_base", gen.vocab().tag_base},
	                   {"content_base", gen.vocab().content_base},
	                   {"function_base", gen.vocab().function_base}},
	              Stage::corpus);
	std::string corpus_bytes;
	for (int t = 1; t < K; ++t) {
		const auto pairs = gen.parallel_pairs(t, n_pairs);
		std::vector<Sentence> base, target;
		for (const auto &p : pairs) {
			base.push_back(p.base);
			target.push_back(p.target);
		}
		const auto b = sentences_to_jsonl(base), tg = sentences_to_jsonl(target);
		ws.write(pairs_file(t, true), b);
		ws.write(pairs_file(t, false), tg);
		corpus_bytes += b + tg;
	}
	ws.write("corpus/prompts.jsonl", sentences_to_jsonl(gen.prompts(cfg.get<int>("corpus.prompts"))));
	std::vector<Sentence> clf_corpus;
	for (int l = 0; l < K; ++l) {
		const auto s = gen.sentences(l, cfg.get<int>("corpus.classifier_sentences"), streams::classifier(l));
		clf_corpus.insert(clf_corpus.end(), s.begin(), s.end());
		ws.write("corpus/attribution_" + std::to_string(l) + ".jsonl",
		         sentences_to_jsonl(
		             gen.sentences(l, cfg.get<int>("corpus.attribution_sentences"), streams::attribution(l))));
	}
	const auto clf = train_classifier(gen.vocab(), clf_corpus, cfg.get<double>("eval.alpha"));
	ws.write_json("corpus/classifier.json", to_json(clf), Stage::corpus);

	// Held-out classifier accuracy on a fresh draw.
	std::size_t hit = 0, total = 0;
	for (int l = 0; l < K; ++l)
		for (const auto &s : gen.sentences(l, 500, "classifier-heldout/" + std::to_string(l))) {
			hit += clf.classify(s.tokens).language == l ? 1 : 0;
			++total;
		}
	CommandResult r;
	r.measured["corpus_hash"] = hash_bytes(corpus_bytes);
	r.measured["classifier_heldout_accuracy"] = static_cast<double>(hit) / total;
	ws.info("classifier held-out accuracy ", r.measured["classifier_heldout_accuracy"].get<double>());
	ws.stamp(Stage::corpus, r.measured);
	return r;
}

inline CommandResult cmd_train_model(Workspace &ws) {
	ws.require(Stage::corpus);
	const Config &cfg = ws.config();
	const auto gen = make_generator(cfg);
	const ModelConfig mc = cfg.model(gen.vocab().size);
	auto params = ModelParams<float>::init(mc);
	TrainingStream stream(gen, gen.stream_seed(streams::training));
	TrainOptions to;
	to.steps = cfg.get<int>("train.steps");
	to.batch_size = cfg.get<int>("train.batch_size");
	to.adam.lr = cfg.get<double>("train.lr");
	to.final_lr_fraction = cfg.get<double>("train.final_lr_fraction");
	AdamState<float> adam(to.adam);
	const auto report = train<float>(
	    params, [&](int n) { return stream.batch(n); }, to, adam,
	    [&](int step, double loss) { ws.info("train step ", step, " loss ", loss); });

	TrainingStream held(gen, gen.stream_seed(streams::heldout));
	const auto heldout = held.batch(cfg.get<int>("train.heldout_sequences"));
	const double acc = next_token_accuracy<float>(params, heldout);
	const double held_loss = loss_and_grad<float>(params, heldout, nullptr);
	ws.info("held-out next-token accuracy ", acc, ", loss ", held_loss);

	Json extra{{"seed", mc.seed},
	           {"step", to.steps},
	           {"loss", report.losses.back()},
	           {"heldout_accuracy", acc},
	           {"heldout_loss", held_loss}};
	ws.write_tensor("model/model.stlb", model_to_file(params, extra), Stage::model);
	std::string csv = "step,loss\n";
	for (std::size_t i = 0; i < report.losses.size(); ++i)
		csv += std::to_string(i) + "," + fmt_real(report.losses[i]) + "\n";
	ws.write("model/train_loss.csv", csv);
	CommandResult r;
	r.measured = Json{{"initial_loss", report.losses.front()},
	                  {"final_loss", report.losses.back()},
	                  {"heldout_accuracy", acc},
	                  {"heldout_loss", held_loss},
	                  {"parameters", params.parameter_count()}};
	ws.stamp(Stage::model, r.measured);
	return r;
}

// Residual activations at every layer 1..n over sequences from `stream`.
inline std::vector<std::vector<float>> collect_activations(const ModelParams<float> &params, TrainingStream &stream,
                                                           std::size_t tokens, int batch, bool drop_first) {
	const int L = params.config.n_layers;
	const std::size_t d = params.config.d_model;
	std::vector<std::vector<float>> acts(L + 1);
	for (auto &a : acts)
		a.reserve(tokens * d);
	std::size_t have = 0;
	while (have < tokens) {
		const auto seqs = stream.batch(batch);
		std::vector<LayerTrace<float>> traces;
		forward_packed<float>(params, seqs, nullptr, &traces, TraceOptions{true, false});
		for (const auto &tr : traces) {
			const std::size_t n = tr.resid_post[0].rows();
			const std::size_t first = drop_first ? 1 : 0;
			const std::size_t take = std::min(n > first ? n - first : 0, tokens - have);
			for (int l = 1; l <= L; ++l) {
				const auto &m = tr.resid_post[l];
				acts[l].insert(acts[l].end(), m.data() + first * d, m.data() + (first + take) * d);
			}
			have += take;
			if (have >= tokens)
				break;
		}
	}
	return acts;
}

inline CommandResult cmd_collect_acts(Workspace &ws) {
	ws.require(Stage::model);
	const Config &cfg = ws.config();
	const auto gen = make_generator(cfg);
	const auto params = load_model(ws);
	const int L = params.config.n_layers;
	const std::size_t d = params.config.d_model;
	const bool drop = cfg.get<bool>("acts.drop_first_position");
	const int batch = cfg.get<int>("acts.batch_size");
	const auto n_train = cfg.get<std::size_t>("acts.tokens");
	const auto n_held = cfg.get<std::size_t>("acts.heldout_tokens");
	CommandResult r;
	{
		TrainingStream s(gen, gen.stream_seed(streams::activations));
		auto acts = collect_activations(params, s, n_train, batch, drop);
		for (int l = 1; l <= L; ++l) {
			TensorFile f;
			f.header["layer"] = l;
			const std::size_t rows = acts[l].size() / d;
			f.add("acts", Matrix<float>(rows, d, std::move(acts[l])));
			ws.write_tensor(acts_file(l), std::move(f), Stage::acts);
			acts[l] = {};
		}
	}
	{
		TrainingStream s(gen, gen.stream_seed("activations-heldout"));
		auto acts = collect_activations(params, s, n_held, batch, drop);
		for (int l = 1; l <= L; ++l) {
			TensorFile f;
			f.header["layer"] = l;
			const std::size_t rows = acts[l].size() / d;
			f.add("acts", Matrix<float>(rows, d, std::move(acts[l])));
			ws.write_tensor(heldout_acts_file(l), std::move(f), Stage::acts);
		}
	}
	r.measured = Json{{"tokens_per_layer", n_train}, {"heldout_tokens_per_layer", n_held}};
	ws.info("collected ", n_train, " activations per layer");
	ws.stamp(Stage::acts, r.measured);
	return r;
}

// Root-mean-square entry of an activation set; L1 coefficients in the
// config are in units of this scale.
inline double activation_rms(const Matrix<float> &a) {
	double ss = 0.0;
	for (float x : a.storage())
		ss += static_cast<double>(x) * x;
	return std::sqrt(ss / static_cast<double>(a.size()));
}

inline CommandResult cmd_train_saes(Workspace &ws) {
	ws.require(Stage::acts);
	const Config &cfg = ws.config();
	const auto params = load_model(ws);
	const int L = params.config.n_layers;
	auto grid = cfg.get<std::vector<double>>("sae.l1_grid");
	if (grid.empty())
		throw ConfigError("sae.l1_grid must list at least one value");
	std::sort(grid.begin(), grid.end());
	const double max_l0_frac = cfg.get<double>("sae.max_l0_fraction");
	const double min_ev = cfg.get<double>("sae.min_explained_variance");

	SaeTrainOptions so;
	so.expansion = cfg.get<std::size_t>("sae.expansion");
	so.steps = cfg.get<int>("sae.steps");
	so.batch_size = cfg.get<int>("sae.batch_size");
	so.lr = cfg.get<double>("sae.lr");
	so.seed = cfg.stage_seed("sae");

	std::string csv = "layer,l1,l1_raw,explained_variance,mean_l0,dead_features,tried\n";
	Json per_layer = Json::array();
	for (int l = 1; l <= L; ++l) {
		const auto data = load_tensor_file(ws.path(acts_file(l))).get("acts");
		const auto held = load_tensor_file(ws.path(heldout_acts_file(l))).get("acts");
		const double rms = activation_rms(data);
		const double max_l0 = max_l0_frac * static_cast<double>(so.expansion * data.cols());
		// Smallest grid value meeting both targets; start in the middle and
		// walk towards it. Falls back to the sparsest tried if none qualifies.
		auto ok = [&](const SaeMetrics &m) { return m.mean_l0 <= max_l0 && m.explained_variance >= min_ev; };
		std::map<std::size_t, std::pair<Sae<float>, SaeMetrics>> tried;
		auto run = [&](std::size_t i) -> const std::pair<Sae<float>, SaeMetrics> & {
			auto it = tried.find(i);
			if (it != tried.end())
				return it->second;
			SaeTrainOptions o = so;
			o.l1 = grid[i] * rms;
			auto sae = train_sae<float>(l, data, o);
			auto m = evaluate_sae(sae, held);
			ws.info("layer ", l, " l1 ", grid[i], " (raw ", o.l1, "): EV ", m.explained_variance, ", L0 ", m.mean_l0,
			        ", dead ", m.dead_features);
			return tried.emplace(i, std::pair{std::move(sae), m}).first->second;
		};
		std::size_t i = grid.size() / 2;
		if (ok(run(i).second)) {
			while (i > 0 && ok(run(i - 1).second))
				--i;
		} else {
			while (i + 1 < grid.size() && !ok(run(i).second))
				++i;
		}
		auto chosen = run(i);
		Sae<float> sae = chosen.first;
		const SaeMetrics m = chosen.second;
		sae.explained_variance = m.explained_variance;
		sae.mean_l0 = m.mean_l0;
		Json hdr{{"l1_normalized", grid[i]}, {"activation_rms", rms}, {"dead_features", m.dead_features}};
		ws.write_tensor(sae_file(l), sae_to_file(sae, hdr), Stage::saes);
		csv += std::to_string(l) + "," + fmt_real(grid[i]) + "," + fmt_real(sae.l1) + "," +
		       fmt_real(m.explained_variance) + "," + fmt_real(m.mean_l0) + "," + std::to_string(m.dead_features) +
		       "," + std::to_string(tried.size()) + "\n";
		per_layer.push_back({{"layer", l},
		                     {"l1", grid[i]},
		                     {"explained_variance", m.explained_variance},
		                     {"mean_l0", m.mean_l0},
		                     {"dead_features", m.dead_features},
		                     {"meets_targets", ok(m)}});
	}
	ws.write("saes/metrics.csv", csv);
	CommandResult r;
	r.measured["saes"] = per_layer;
	ws.stamp(Stage::saes, r.measured);
	return r;
}

inline CommandResult cmd_find_features(Workspace &ws) {
	ws.require(Stage::saes);
	const Config &cfg = ws.config();
	const auto params = load_model(ws);
	const int L = params.config.n_layers;
	const int K = cfg.get<int>("corpus.languages");
	const auto k = cfg.get<std::size_t>("contrast.k");
	const bool weighted = cfg.get<bool>("contrast.token_weighted");

	Json results = Json::array();
	TensorFile deltas;
	std::string corpus_bytes;
	for (int t = 1; t < K; ++t)
		corpus_bytes += read_file(ws.path(pairs_file(t, true))) + read_file(ws.path(pairs_file(t, false)));
	const std::string corpus_hash = hash_bytes(corpus_bytes);
	for (int l = 1; l <= L; ++l) {
		const auto sae = load_sae(ws, l);
		for (int t = 1; t < K; ++t) {
			const auto base = load_sentences(ws, pairs_file(t, true));
			const auto target = load_sentences(ws, pairs_file(t, false));
			const auto cb = encode_corpus(sae, residuals_at(params, base, l));
			const auto ct = encode_corpus(sae, residuals_at(params, target, l));
			for (auto mode : {ContrastMode::final, ContrastMode::mean}) {
				auto c = contrast(ct, cb, mode, k, weighted);
				c.layer = l;
				c.target = t;
				results.push_back(to_json(c, corpus_hash));
				deltas.add("delta/" + std::to_string(l) + "/" + std::to_string(t) + "/" + to_string(mode),
				           Matrix<float>::row_vector(std::vector<float>(c.delta.begin(), c.delta.end())));
			}
		}
		ws.info("contrasts done for layer ", l);
	}
	ws.write_json("features/contrasts.json", Json{{"results", results}}, Stage::features);
	ws.write_tensor("features/delta.stlb", std::move(deltas), Stage::features);
	CommandResult r;
	r.measured["corpus_hash"] = corpus_hash;
	ws.stamp(Stage::features, r.measured);
	return r;
}

struct EvalContext {
	ModelParams<float> params;
	std::vector<Sae<float>> saes; // index = layer, entry 0 unused
	LangClassifier clf;
	VocabSpec vocab;
	std::vector<Sentence> prompts;
	GenerateOptions gen;
	std::uint64_t seed = 0;
	bool include_prompt = false;
};

inline EvalContext make_eval_context(const Workspace &ws, bool with_saes, std::size_t n_prompts) {
	const Config &cfg = ws.config();
	EvalContext c;
	c.params = load_model(ws);
	if (with_saes) {
		c.saes.resize(c.params.config.n_layers + 1);
		for (int l = 1; l <= c.params.config.n_layers; ++l)
			c.saes[l] = load_sae(ws, l);
	}
	c.clf = load_classifier(ws);
	c.vocab = make_generator(cfg).vocab();
	c.prompts = load_sentences(ws, "corpus/prompts.jsonl");
	if (n_prompts < c.prompts.size())
		c.prompts.resize(n_prompts);
	c.gen.temperature = cfg.get<double>("generate.temperature");
	c.gen.max_new = cfg.get<int>("generate.max_new");
	c.gen.eos_token = kEos;
	c.gen.steer_prompt = !cfg.get<bool>("steer.generated_only");
	c.seed = cfg.stage_seed("generate");
	c.include_prompt = cfg.get<bool>("eval.include_prompt");
	return c;
}

// Generation seed for prompt i; shared across conditions so steered and
// unsteered runs of one prompt see the same random stream.
inline std::uint64_t prompt_seed(const EvalContext &c, std::size_t i, std::string_view variant = "") {
	const std::uint64_t s = split_seed(c.seed, static_cast<std::uint64_t>(i));
	return variant.empty() ? s : split_seed(s, variant);
}

inline EvalRecord run_prompt(const EvalContext &c, std::size_t i, int target, const SteerSpec *spec,
                             std::span<const int> prefix = {}) {
	const auto &p = c.prompts[i];
	std::vector<int> prompt(prefix.begin(), prefix.end());
	prompt.insert(prompt.end(), p.tokens.begin(), p.tokens.end());
	Rng rng(prompt_seed(c, i));
	Generation g = spec ? steered_generate<float>(c.params, c.saes.at(spec->layer), *spec, prompt, c.gen, rng)
	                    : generate<float>(c.params, prompt, c.gen, rng);
	EvalRecord r;
	r.prompt_id = static_cast<int>(i);
	r.target = target;
	r.tokens = std::move(g.tokens);
	if (c.include_prompt) {
		std::vector<int> full(p.tokens);
		full.insert(full.end(), r.tokens.begin(), r.tokens.end());
		EvalRecord tmp = r;
		tmp.tokens = full;
		score_record(tmp, c.clf, c.vocab, p.tokens);
		r.verdict = tmp.verdict;
		r.lang_prob = tmp.lang_prob;
		r.semantic = r.verdict ? semantic_score(c.vocab, p.tokens, r.tokens) : 0.0;
	} else {
		score_record(r, c.clf, c.vocab, p.tokens);
	}
	return r;
}

inline std::vector<ContrastMode> sweep_modes(const Config &cfg) {
	std::vector<ContrastMode> out;
	for (const auto &s : cfg.get<std::vector<std::string>>("sweep.modes"))
		out.push_back(contrast_mode_from_string(s));
	if (out.empty())
		throw ConfigError("sweep.modes must not be empty");
	return out;
}

inline CommandResult cmd_sweep(Workspace &ws) {
	ws.require(Stage::saes);
	ws.require(Stage::features);
	const Config &cfg = ws.config();
	const auto ctx = make_eval_context(ws, true, cfg.get<std::size_t>("sweep.prompts"));
	const int L = ctx.params.config.n_layers;
	const int K = cfg.get<int>("corpus.languages");
	const auto contrasts = load_contrasts(ws, ctx.saes.at(1).m());
	const double scale = cfg.get<double>("steer.scale");
	const auto modes = sweep_modes(cfg);

	std::vector<SummaryRow> best_rows, all_rows;
	std::string records;
	for (int t = 1; t < K; ++t)
		for (auto mode : modes)
			for (int l = 1; l <= L; ++l) {
				const auto &c = find_contrast(contrasts, l, t, mode);
				std::optional<SummaryRow> best;
				for (std::size_t rank = 0; rank < c.top_k.size(); ++rank) {
					const SteerSpec spec = spec_from_contrast(c, rank, scale);
					std::vector<EvalRecord> recs;
					for (std::size_t i = 0; i < ctx.prompts.size(); ++i) {
						EvalRecord r = run_prompt(ctx, i, t, &spec);
						r.layer = l;
						r.feature = static_cast<long>(c.top_k[rank]);
						r.mode = to_string(mode);
						r.condition = "steer";
						records += to_json(r).dump() + "\n";
						recs.push_back(std::move(r));
					}
					const SummaryRow row = summarize(recs);
					all_rows.push_back(row);
					if (!best || better_row(row, *best))
						best = row;
				}
				best_rows.push_back(*best);
				ws.info("sweep lang ", t, " ", to_string(mode), " layer ", l, ": best feature ", best->feature,
				        " acc ", best->lang_acc, " sem ", best->sem_mean);
			}
	ws.write("sweep/sweep.csv", sweep_csv(best_rows));
	ws.write("sweep/sweep_all.csv", sweep_csv(all_rows));
	ws.write("sweep/records.jsonl", records);
	CommandResult r;
	Json best = Json::object();
	for (int t = 1; t < K; ++t) {
		double acc = 0.0;
		for (const auto &row : best_rows)
			if (row.language == t)
				acc = std::max(acc, row.lang_acc);
		best[std::to_string(t)] = acc;
	}
	r.measured["best_lang_acc"] = best;
	ws.stamp(Stage::sweep, r.measured);
	return r;
}

inline CommandResult cmd_baselines(Workspace &ws) {
	ws.require(Stage::model);
	ws.require(Stage::corpus);
	const Config &cfg = ws.config();
	const auto ctx = make_eval_context(ws, false, cfg.get<std::size_t>("baselines.prompts"));
	const int K = cfg.get<int>("corpus.languages");
	std::vector<SummaryRow> rows;
	std::string records;

	auto emit = [&](std::vector<EvalRecord> &recs, const std::string &kind) {
		for (auto &r : recs) {
			r.condition = kind;
			records += to_json(r).dump() + "\n";
		}
		SummaryRow row = summarize(recs);
		row.kind = kind;
		rows.push_back(row);
	};

	// Unsteered continuations do not depend on the target; generate once and
	// score against every language.
	std::vector<EvalRecord> plain;
	for (std::size_t i = 0; i < ctx.prompts.size(); ++i)
		plain.push_back(run_prompt(ctx, i, 0, nullptr));
	for (int t = 0; t < K; ++t) {
		std::vector<EvalRecord> recs = plain;
		for (auto &r : recs) {
			r.target = t;
			score_record(r, ctx.clf, ctx.vocab, ctx.prompts[r.prompt_id].tokens);
		}
		emit(recs, "unsteered");
	}
	for (int t = 0; t < K; ++t) {
		const int tag = ctx.vocab.tag_token(t);
		std::vector<EvalRecord> recs;
		for (std::size_t i = 0; i < ctx.prompts.size(); ++i)
			recs.push_back(run_prompt(ctx, i, t, nullptr, std::span<const int>(&tag, 1)));
		emit(recs, "prompt");
		ws.info("prompt baseline lang ", t, ": acc ", rows.back().lang_acc, " sem ", rows.back().sem_mean);
	}

	// Self-consistency: two independent unsteered continuations per prompt.
	std::vector<double> sims;
	for (std::size_t i = 0; i < ctx.prompts.size(); ++i) {
		const auto &p = ctx.prompts[i].tokens;
		Rng a(prompt_seed(ctx, i, "self-a")), b(prompt_seed(ctx, i, "self-b"));
		const auto ga = generate<float>(ctx.params, p, ctx.gen, a);
		const auto gb = generate<float>(ctx.params, p, ctx.gen, b);
		sims.push_back(semantic_score(ctx.vocab, ga.tokens, gb.tokens));
	}
	const auto sc = mean_ci95(sims);
	SummaryRow self;
	self.kind = "self_consistency";
	self.sem_mean = sc.mean;
	self.sem_ci95 = sc.ci95;
	self.n_prompts = sc.n;
	rows.push_back(self);
	ws.info("self-consistency ", sc.mean, " +- ", sc.ci95);

	ws.write("baselines/baselines.csv", baselines_csv(rows));
	ws.write("baselines/records.jsonl", records);
	CommandResult r;
	r.measured["self_consistency"] = {{"mean", sc.mean}, {"ci95", sc.ci95}, {"n", sc.n}};
	Json unsteered = Json::object(), prompt = Json::object();
	for (const auto &row : rows) {
		if (row.kind == "unsteered")
			unsteered[std::to_string(row.language)] = row.lang_acc;
		if (row.kind == "prompt")
			prompt[std::to_string(row.language)] = row.lang_acc;
	}
	r.measured["unsteered_lang_acc"] = unsteered;
	r.measured["prompt_lang_acc"] = prompt;
	ws.stamp(Stage::baselines, r.measured);
	return r;
}

// Shared setup for attribute/decompose: double-precision model and the
// unit direction of each language's top-1 feature per layer.
struct AnalysisContext {
	ModelParams<double> params;
	std::vector<std::vector<std::vector<double>>> direction; // [layer][lang]
	std::vector<std::vector<long>> feature;                  // [layer][lang]
	std::vector<std::vector<Sentence>> sentences;            // [lang]
	int n_layers = 0;
	int languages = 0;
	PositionFilter filter;
};

inline AnalysisContext make_analysis_context(const Workspace &ws) {
	ws.require(Stage::features);
	const Config &cfg = ws.config();
	AnalysisContext a;
	const auto pf = load_model(ws);
	a.params = pf.cast<double>();
	a.n_layers = pf.config.n_layers;
	a.languages = cfg.get<int>("corpus.languages");
	a.filter.last_token_only = cfg.get<bool>("attribution.last_token_only");
	a.direction.resize(a.n_layers + 1);
	a.feature.resize(a.n_layers + 1);
	std::vector<ContrastResult> contrasts;
	for (int l = 1; l <= a.n_layers; ++l) {
		const auto sae = load_sae(ws, l).cast<double>();
		if (contrasts.empty())
			contrasts = load_contrasts(ws, sae.m());
		a.direction[l].resize(a.languages);
		a.feature[l].assign(a.languages, -1);
		for (int t = 1; t < a.languages; ++t) {
			const auto &c = find_contrast(contrasts, l, t, ContrastMode::final);
			a.feature[l][t] = static_cast<long>(c.top_k.front());
			a.direction[l][t] = feature_direction(sae, c.top_k.front());
		}
	}
	for (int t = 0; t < a.languages; ++t)
		a.sentences.push_back(load_sentences(ws, "corpus/attribution_" + std::to_string(t) + ".jsonl"));
	return a;
}

inline std::vector<LayerTrace<double>> analysis_traces(const AnalysisContext &a, int lang, bool heads) {
	std::vector<LayerTrace<double>> out;
	for (const auto &s : a.sentences[lang])
		out.push_back(forward<double>(a.params, s.tokens, TraceOptions{true, heads}).trace);
	return out;
}

inline CommandResult cmd_attribute(Workspace &ws) {
	auto a = make_analysis_context(ws);
	std::vector<HeadAttribution> grid;
	double worst = 0.0;
	for (int in = 1; in < a.languages; ++in) {
		const auto traces = analysis_traces(a, in, true);
		for (int l = 1; l <= a.n_layers; ++l)
			for (int f = 1; f < a.languages; ++f) {
				auto h = head_attribution(traces, l, a.direction[l][f], a.filter);
				h.feature_lang = f;
				h.input_lang = in;
				h.feature = a.feature[l][f];
				require_conserved(h);
				double sum = h.bias_dot;
				for (double x : h.head_dots)
					sum += x;
				worst = std::max({worst, h.max_residual, std::abs(sum - h.attn_dot)});
				grid.push_back(std::move(h));
			}
	}
	Json rows = Json::array();
	for (const auto &h : grid)
		rows.push_back({{"layer", h.layer},
		                {"feature_lang", h.feature_lang},
		                {"input_lang", h.input_lang},
		                {"feature", h.feature},
		                {"head_dots", h.head_dots},
		                {"bias_dot", h.bias_dot},
		                {"attn_dot", h.attn_dot},
		                {"top_heads", h.top_heads(3)},
		                {"max_residual", h.max_residual}});
	ws.write("analysis/attribution.csv", attribution_csv(grid));
	ws.write_json("analysis/attribution.json", Json{{"rows", rows}}, Stage::attribute);
	CommandResult r;
	r.measured["max_conservation_error"] = worst;
	ws.info("head attribution: worst conservation error ", worst);
	ws.stamp(Stage::attribute, r.measured);
	return r;
}

inline CommandResult cmd_decompose(Workspace &ws) {
	auto a = make_analysis_context(ws);
	std::vector<DecompReport> reports;
	double worst = 0.0;
	for (int f = 1; f < a.languages; ++f) {
		const auto traces = analysis_traces(a, f, false);
		for (int l = 1; l <= a.n_layers; ++l) {
			auto rep = decompose(traces, l, a.direction[l][f], a.filter);
			rep.feature_lang = f;
			rep.feature = a.feature[l][f];
			require_conserved(rep);
			worst = std::max(worst, std::max(rep.max_residual, std::abs(rep.total() - rep.resid_dot)));
			reports.push_back(std::move(rep));
		}
	}
	Json rows = Json::array();
	for (const auto &rep : reports) {
		Json comps = Json::array(), top = Json::array();
		for (const auto &c : rep.contributions)
			comps.push_back({{"label", c.label}, {"layer", c.layer}, {"dot", c.dot}});
		for (const auto &c : rep.top(5))
			top.push_back(c.label);
		rows.push_back({{"target_layer", rep.target_layer},
		                {"feature_lang", rep.feature_lang},
		                {"feature", rep.feature},
		                {"contributions", comps},
		                {"top5", top},
		                {"resid_dot", rep.resid_dot},
		                {"max_residual", rep.max_residual}});
	}
	ws.write("analysis/decomp.csv", decomp_csv(reports));
	ws.write_json("analysis/decomp.json", Json{{"rows", rows}}, Stage::decompose);
	CommandResult r;
	r.measured["max_conservation_error"] = worst;
	ws.info("decomposition: worst conservation error ", worst);
	ws.stamp(Stage::decompose, r.measured);
	return r;
}

// Best (layer, feature, mode) per language from sweep/sweep.csv, if any.
struct CsvTable {
	std::vector<std::string> header;
	std::vector<std::vector<std::string>> rows;

	std::size_t col(const std::string &name) const {
		for (std::size_t i = 0; i < header.size(); ++i)
			if (header[i] == name)
				return i;
		throw IoError("csv column '" + name + "' missing");
	}
};

inline CsvTable parse_csv(std::string_view text) {
	CsvTable t;
	std::size_t pos = 0;
	bool first = true;
	while (pos < text.size()) {
		auto nl = text.find('\n', pos);
		if (nl == std::string_view::npos)
			nl = text.size();
		std::string_view line = text.substr(pos, nl - pos);
		pos = nl + 1;
		if (line.empty())
			continue;
		std::vector<std::string> cells;
		std::size_t c = 0;
		while (true) {
			auto comma = line.find(',', c);
			cells.emplace_back(line.substr(c, comma == std::string_view::npos ? line.size() - c : comma - c));
			if (comma == std::string_view::npos)
				break;
			c = comma + 1;
		}
		if (first) {
			t.header = std::move(cells);
			first = false;
		} else {
			t.rows.push_back(std::move(cells));
		}
	}
	return t;
}

inline CommandResult cmd_demo(Workspace &ws, std::ostream &out = std::cout) {
	ws.require(Stage::features);
	const Config &cfg = ws.config();
	auto ctx = make_eval_context(ws, true, static_cast<std::size_t>(-1));
	const int K = cfg.get<int>("corpus.languages");
	const auto contrasts = load_contrasts(ws, ctx.saes.at(1).m());
	const auto pi = cfg.get<std::size_t>("demo.prompt");
	if (pi >= ctx.prompts.size())
		throw ConfigError("demo.prompt out of range");
	const int fixed_layer = cfg.get<int>("demo.layer");
	std::optional<CsvTable> sweep;
	if (fixed_layer == 0 && ws.fresh(Stage::sweep))
		sweep = parse_csv(read_file(ws.path("sweep/sweep.csv")));

	std::string text;
	text += "prompt:     " + describe_tokens(ctx.vocab, ctx.prompts[pi].tokens) + "\n";
	const auto plain = run_prompt(ctx, pi, 0, nullptr);
	text += "unsteered:  " + describe_tokens(ctx.vocab, plain.tokens) + "\n";
	for (int t = 1; t < K; ++t) {
		int layer = fixed_layer > 0 ? fixed_layer : ctx.params.config.n_layers;
		long feature = -1;
		ContrastMode mode = ContrastMode::final;
		if (sweep) {
			double best = -1.0;
			for (const auto &row : sweep->rows)
				if (std::stoi(row[sweep->col("language")]) == t) {
					const double s = std::stod(row[sweep->col("sem_mean")]);
					if (s > best) {
						best = s;
						layer = std::stoi(row[sweep->col("layer")]);
						feature = std::stol(row[sweep->col("feature")]);
						mode = contrast_mode_from_string(row[sweep->col("mode")]);
					}
				}
		}
		const auto &c = find_contrast(contrasts, layer, t, mode);
		std::size_t rank = 0;
		for (std::size_t k = 0; k < c.top_k.size(); ++k)
			if (static_cast<long>(c.top_k[k]) == feature)
				rank = k;
		const auto spec = spec_from_contrast(c, rank, cfg.get<double>("steer.scale"));
		const auto r = run_prompt(ctx, pi, t, &spec);
		text += "lang " + std::to_string(t) + " (layer " + std::to_string(layer) + ", feature " +
		        std::to_string(spec.interventions.front().feature) + ", offset " +
		        fmt_real(spec.interventions.front().offset) + "): " + describe_tokens(ctx.vocab, r.tokens) +
		        (r.verdict ? "" : "   [not classified as target]") + "\n";
	}
	out << text;
	ws.write("demo/demo.txt", text);
	ws.stamp(Stage::demo);
	return {};
}

inline CommandResult cmd_report(Workspace &ws) {
	ws.require(Stage::sweep);
	ws.require(Stage::baselines);
	ws.require(Stage::attribute);
	ws.require(Stage::decompose);
	const Config &cfg = ws.config();
	const int K = cfg.get<int>("corpus.languages");
	const auto sweep = parse_csv(read_file(ws.path("sweep/sweep.csv")));
	const auto base = parse_csv(read_file(ws.path("baselines/baselines.csv")));

	auto num = [](const std::vector<std::string> &row, std::size_t c) { return std::stod(row[c]); };
	double self_mean = 0.0, self_ci = 0.0;
	for (const auto &row : base.rows)
		if (row[base.col("kind")] == "self_consistency") {
			self_mean = num(row, base.col("sem_mean"));
			self_ci = num(row, base.col("sem_ci95"));
		}
	std::string table = "language,best_layer,mode,feature,steer_lang_acc,steer_sem_mean,steer_sem_ci95,"
	                    "prompt_lang_acc,prompt_sem_mean,prompt_sem_ci95,unsteered_lang_acc,self_consistency_mean,"
	                    "self_consistency_ci95\n";
	std::string md = "| language | layer | steer acc | steer sem | prompt acc | prompt sem | unsteered acc |\n"
	                 "|---|---|---|---|---|---|---|\n";
	for (int t = 1; t < K; ++t) {
		const std::vector<std::string> *best = nullptr;
		for (const auto &row : sweep.rows)
			if (std::stoi(row[sweep.col("language")]) == t &&
			    (!best || num(row, sweep.col("lang_acc")) > num(*best, sweep.col("lang_acc")) ||
			     (num(row, sweep.col("lang_acc")) == num(*best, sweep.col("lang_acc")) &&
			      num(row, sweep.col("sem_mean")) > num(*best, sweep.col("sem_mean")))))
				best = &row;
		const std::vector<std::string> *prompt = nullptr, *plain = nullptr;
		for (const auto &row : base.rows)
			if (std::stoi(row[base.col("language")]) == t) {
				if (row[base.col("kind")] == "prompt")
					prompt = &row;
				if (row[base.col("kind")] == "unsteered")
					plain = &row;
			}
		if (!best || !prompt || !plain)
			throw StageError("report: missing rows for language " + std::to_string(t));
		const auto &b = *best;
		table += std::to_string(t) + "," + b[sweep.col("layer")] + "," + b[sweep.col("mode")] + "," +
		         b[sweep.col("feature")] + "," + b[sweep.col("lang_acc")] + "," + b[sweep.col("sem_mean")] + "," +
		         b[sweep.col("sem_ci95")] + "," + (*prompt)[base.col("lang_acc")] + "," +
		         (*prompt)[base.col("sem_mean")] + "," + (*prompt)[base.col("sem_ci95")] + "," +
		         (*plain)[base.col("lang_acc")] + "," + fmt_real(self_mean) + "," + fmt_real(self_ci) + "\n";
		md += "| " + std::to_string(t) + " | " + b[sweep.col("layer")] + " | " + b[sweep.col("lang_acc")] + " | " +
		      b[sweep.col("sem_mean")] + " +- " + b[sweep.col("sem_ci95")] + " | " + (*prompt)[base.col("lang_acc")] +
		      " | " + (*prompt)[base.col("sem_mean")] + " | " + (*plain)[base.col("lang_acc")] + " |\n";
	}
	md += "\nself-consistency semantic score: " + fmt_real(self_mean) + " +- " + fmt_real(self_ci) + "\n";

	// Dominance and inheritance flags from the analysis artifacts.
	std::vector<HeadAttribution> grid;
	for (const auto &row : Json::parse(read_file(ws.path("analysis/attribution.json"))).at("rows")) {
		HeadAttribution h;
		h.layer = row.at("layer");
		h.feature_lang = row.at("feature_lang");
		h.input_lang = row.at("input_lang");
		h.feature = row.at("feature");
		h.head_dots = row.at("head_dots").get<std::vector<double>>();
		h.bias_dot = row.at("bias_dot");
		h.attn_dot = row.at("attn_dot");
		grid.push_back(std::move(h));
	}
	std::vector<DecompReport> reps;
	for (const auto &row : Json::parse(read_file(ws.path("analysis/decomp.json"))).at("rows")) {
		DecompReport rep;
		rep.target_layer = row.at("target_layer");
		rep.feature_lang = row.at("feature_lang");
		rep.feature = row.at("feature");
		for (const auto &c : row.at("contributions"))
			rep.contributions.push_back({c.at("label"), c.at("layer"), c.at("dot")});
		rep.resid_dot = row.at("resid_dot");
		reps.push_back(std::move(rep));
	}
	const auto dom = dominance_report(grid, reps, cfg.get<double>("attribution.dominance_factor"));

	ws.write("report/table.csv", table);
	ws.write("report/summary.md", md);
	ws.write_json("analysis/dominance.json", to_json(dom), Stage::report);
	ws.info("\n", md);
	ws.stamp(Stage::report);
	return {};
}

// --- command dispatch --------------------------------------------------------

inline const std::vector<std::string> &command_names() {
	static const std::vector<std::string> names{"gen-corpus", "train-model", "collect-acts", "train-saes",
	                                            "find-features", "sweep", "baselines", "attribute",
	                                            "decompose", "demo", "report"};
	return names;
}

inline fs::path default_output_root() {
	if (const char *env = std::getenv("STEERLAB_OUT"); env && *env)
		return env;
	return "steerlab_out";
}

// Runs one command under the output lock and records it in the manifest.
inline CommandResult run_command(const std::string &name, const Config &cfg, const fs::path &root,
                                 std::ostream *log = &std::clog, std::ostream &out = std::cout) {
	OutputLock lock(root);
	Workspace ws(root, cfg, log);
	const auto t0 = std::chrono::steady_clock::now();
	CommandResult r;
	if (name == "gen-corpus")
		r = cmd_gen_corpus(ws);
	else if (name == "train-model")
		r = cmd_train_model(ws);
	else if (name == "collect-acts")
		r = cmd_collect_acts(ws);
	else if (name == "train-saes")
		r = cmd_train_saes(ws);
	else if (name == "find-features")
		r = cmd_find_features(ws);
	else if (name == "sweep")
		r = cmd_sweep(ws);
	else if (name == "baselines")
		r = cmd_baselines(ws);
	else if (name == "attribute")
		r = cmd_attribute(ws);
	else if (name == "decompose")
		r = cmd_decompose(ws);
	else if (name == "demo")
		r = cmd_demo(ws, out);
	else if (name == "report")
		r = cmd_report(ws);
	else
		throw ConfigError("unknown command '" + name + "'");
	const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
	ws.append_manifest(name, secs, r.measured);
	return r;
}

} // namespace steerlab

#endif // STEERLAB_PIPELINE_HPP
