#include <gtest/gtest.h>

#include <sstream>

#include "steerlab/pipeline.hpp"

using namespace steerlab;

namespace {

Config tiny() {
	return Config::from_json(Json{{"model.n_layers", 2},
	                              {"model.n_heads", 2},
	                              {"model.d_model", 16},
	                              {"model.d_ff", 32},
	                              {"train.steps", 40},
	                              {"train.heldout_sequences", 20},
	                              {"acts.tokens", 3000},
	                              {"acts.heldout_tokens", 600},
	                              {"sae.steps", 60},
	                              {"sae.batch_size", 64},
	                              {"corpus.pairs", 30},
	                              {"corpus.prompts", 8},
	                              {"corpus.classifier_sentences", 100},
	                              {"corpus.attribution_sentences", 4},
	                              {"sweep.prompts", 4},
	                              {"baselines.prompts", 4},
	                              {"generate.max_new", 8}});
}

struct TempDir {
	fs::path path;
	explicit TempDir(const std::string &name) : path(fs::temp_directory_path() / ("steerlab_test_" + name)) {
		fs::remove_all(path);
	}
	~TempDir() { fs::remove_all(path); }
};

void run_all(const Config &cfg, const fs::path &root) {
	std::ostringstream out;
	for (const auto &c : command_names())
		run_command(c, cfg, root, nullptr, out);
}

std::map<std::string, std::string> snapshot(const fs::path &root) {
	std::map<std::string, std::string> files;
	for (const auto &e : fs::recursive_directory_iterator(root)) {
		if (!e.is_regular_file())
			continue;
		const auto rel = fs::relative(e.path(), root).string();
		if (rel == "manifest.jsonl" || rel == ".lock")
			continue;
		files[rel] = read_file(e.path());
	}
	return files;
}

} // namespace

TEST(Config, UnknownKeyAndTypeErrors) {
	Config c;
	EXPECT_THROW(c.set("model.n_layer", 3), ConfigError);
	EXPECT_THROW(c.set("model.n_layers", "six"), ConfigError);
	EXPECT_THROW(c.set_assignment("model.n_layers"), ConfigError);
	EXPECT_THROW(Config::from_json(Json::array()), ConfigError);
	try {
		c.set("sae.l1", 1.0);
		FAIL();
	} catch (const ConfigError &e) {
		EXPECT_NE(std::string(e.what()).find("sae.l1"), std::string::npos);
	}
}

TEST(Config, AssignmentParsing) {
	Config c;
	c.set_assignment("model.n_layers=3");
	EXPECT_EQ(c.get<int>("model.n_layers"), 3);
	c.set_assignment("sae.l1_grid=[1,2.5]");
	EXPECT_EQ(c.get<std::vector<double>>("sae.l1_grid"), (std::vector<double>{1.0, 2.5}));
	c.set_assignment("sae.l1_grid=4");
	EXPECT_EQ(c.get<std::vector<double>>("sae.l1_grid"), (std::vector<double>{4.0}));
	c.set_assignment("sweep.modes=mean");
	EXPECT_EQ(c.get<std::vector<std::string>>("sweep.modes"), (std::vector<std::string>{"mean"}));
	c.set_assignment("steer.generated_only=true");
	EXPECT_TRUE(c.get<bool>("steer.generated_only"));
}

TEST(StageHash, ScopedToUpstreamKeys) {
	Workspace a("unused", Config{}, nullptr);
	Config c2;
	c2.set("steer.scale", 2.0);
	Workspace b("unused", c2, nullptr);
	EXPECT_EQ(a.stage_hash(Stage::model), b.stage_hash(Stage::model));
	EXPECT_EQ(a.stage_hash(Stage::saes), b.stage_hash(Stage::saes));
	EXPECT_NE(a.stage_hash(Stage::sweep), b.stage_hash(Stage::sweep));
	Config c3;
	c3.set("seed", 2);
	Workspace c("unused", c3, nullptr);
	EXPECT_NE(a.stage_hash(Stage::corpus), c.stage_hash(Stage::corpus));
}

TEST(Lock, SecondHolderRefused) {
	TempDir d("lock");
	{
		OutputLock l(d.path);
		EXPECT_THROW(OutputLock again(d.path), StageError);
	}
	EXPECT_NO_THROW(OutputLock again(d.path));
}

TEST(Stages, MissingUpstreamNamesProducer) {
	TempDir d("missing");
	std::ostringstream out;
	try {
		run_command("sweep", tiny(), d.path, nullptr, out);
		FAIL();
	} catch (const StageError &e) {
		EXPECT_NE(std::string(e.what()).find("steerlab train-saes"), std::string::npos) << e.what();
	}
}

TEST(Stages, EndToEndDeterministicAndGuarded) {
	TempDir d1("e2e_a"), d2("e2e_b");
	const auto cfg = tiny();
	run_all(cfg, d1.path);
	for (const char *f : {"sweep/sweep.csv", "sweep/records.jsonl", "baselines/baselines.csv",
	                      "analysis/attribution.csv", "analysis/decomp.csv", "analysis/dominance.json",
	                      "report/table.csv", "manifest.jsonl"})
		EXPECT_TRUE(fs::exists(d1.path / f)) << f;

	const auto sweep = parse_csv(read_file(d1.path / "sweep/sweep.csv"));
	EXPECT_EQ(sweep.header, (std::vector<std::string>{"layer", "language", "mode", "feature", "lang_acc", "sem_mean",
	                                                   "sem_ci95", "n_prompts"}));
	// best of 3 features per (layer, target): 2 layers x 4 targets
	EXPECT_EQ(sweep.rows.size(), 8u);
	EXPECT_EQ(parse_csv(read_file(d1.path / "sweep/sweep_all.csv")).rows.size(), 24u);

	run_all(cfg, d2.path);
	const auto a = snapshot(d1.path), b = snapshot(d2.path);
	ASSERT_EQ(a.size(), b.size());
	for (const auto &[rel, bytes] : a)
		EXPECT_TRUE(b.at(rel) == bytes) << rel << " differs between identical runs";

	// A config change upstream of the SAEs makes them stale for sweep.
	auto changed = cfg;
	changed.set("sae.steps", 61);
	std::ostringstream out;
	try {
		run_command("sweep", changed, d1.path, nullptr, out);
		FAIL();
	} catch (const StageError &e) {
		EXPECT_NE(std::string(e.what()).find("train-saes"), std::string::npos) << e.what();
	}

	// A tampered artifact is detected.
	{
		std::ofstream f(d1.path / "saes/layer_1.stlb", std::ios::app);
		f << "x";
	}
	try {
		run_command("find-features", cfg, d1.path, nullptr, out);
		FAIL();
	} catch (const StageError &e) {
		EXPECT_NE(std::string(e.what()).find("saes/layer_1.stlb"), std::string::npos) << e.what();
	}
}

TEST(Stages, FindFeaturesRequiresSaes) {
	TempDir d("needs_saes");
	const auto cfg = tiny();
	std::ostringstream out;
	for (const char *c : {"gen-corpus", "train-model", "collect-acts"})
		run_command(c, cfg, d.path, nullptr, out);
	try {
		run_command("find-features", cfg, d.path, nullptr, out);
		FAIL();
	} catch (const StageError &e) {
		EXPECT_NE(std::string(e.what()).find("steerlab train-saes"), std::string::npos) << e.what();
	}
}
