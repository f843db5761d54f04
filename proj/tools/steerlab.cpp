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

// steerlab <command> --config path [--set key=value]... [--out dir]

#include <CLI11.hpp>

#include <map>

#include "steerlab/pipeline.hpp"

int main(int argc, char **argv) {
	CLI::App app{"steerlab: language steering with sparse autoencoder features on a toy multilingual model"};
	app.require_subcommand(1, 1);

	std::string config_path;
	std::vector<std::string> overrides;
	std::string out_dir;
	bool quiet = false;
	bool print_config = false;

	const std::map<std::string, std::string> about{
	    {"gen-corpus", "write parallel pairs, prompts, attribution sets and the language classifier"},
	    {"train-model", "train the transformer on the tagged training mixture"},
	    {"collect-acts", "dump residual activations per layer"},
	    {"train-saes", "train one SAE per layer, walking the l1 grid"},
	    {"find-features", "rank language features by contrast per layer and target"},
	    {"sweep", "steer with each top-k feature at every layer and score"},
	    {"baselines", "unsteered, tag-prompt and self-consistency baselines"},
	    {"attribute", "per-head attribution onto the chosen feature directions"},
	    {"decompose", "residual decomposition by component"},
	    {"demo", "print steered continuations for one prompt"},
	    {"report", "collect the headline table"}};
	for (const auto &name : steerlab::command_names()) {
		auto *sub = app.add_subcommand(name, about.at(name));
		sub->add_option("--config", config_path, "JSON config with dotted keys")->check(CLI::ExistingFile);
		sub->add_option("--set", overrides, "override one key, e.g. --set sae.l1_grid=[1,3,10]")
		    ->allow_extra_args(false);
		sub->add_option("--out", out_dir, "output root (default: $STEERLAB_OUT or ./steerlab_out)");
		sub->add_flag("-q,--quiet", quiet, "suppress progress logging");
		sub->add_flag("--print-config", print_config, "print the resolved config and exit");
	}

	CLI11_PARSE(app, argc, argv);
	const std::string command = app.get_subcommands().front()->get_name();

	try {
		steerlab::Config cfg = config_path.empty() ? steerlab::Config{} : steerlab::Config::load(config_path);
		for (const auto &kv : overrides)
			cfg.set_assignment(kv);
		if (print_config) {
			std::cout << cfg.values().dump(2) << '\n';
			return 0;
		}
		const steerlab::fs::path root = out_dir.empty() ? steerlab::default_output_root() : steerlab::fs::path(out_dir);
		steerlab::run_command(command, cfg, root, quiet ? nullptr : &std::clog, std::cout);
	} catch (const steerlab::ConfigError &e) {
		std::cerr << "steerlab: config error: " << e.what() << '\n';
		return 2;
	} catch (const steerlab::StageError &e) {
		std::cerr << "steerlab: " << e.what() << '\n';
		return 3;
	} catch (const std::exception &e) {
		std::cerr << "steerlab " << command << ": " << e.what() << '\n';
		return 1;
	}
	return 0;
}
