// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rmot/commands.hpp"

namespace {

// One line on stderr: `rmot: error kind=<Kind> message=<json string>`.
int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << "rmot: error kind=" << kind << " message=" << nlohmann::json(message).dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Referring multi-object tracking at desk scale"};
    app.require_subcommand(1, 1);
    std::string config_path;
    std::vector<std::string> overrides;
    for (const auto& name : rmot::command_names()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "key=value configuration file");
        sub->add_option("--set", overrides, "key=value override, repeatable")->take_all();
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("UsageError", e.what(), 2);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    rmot::RunConfig cfg;
    try {
        if (!config_path.empty()) rmot::load_config(cfg, config_path);
        for (const auto& o : overrides) rmot::apply_assignment(cfg, o);
    } catch (const rmot::ConfigError& e) {
        return fail("ConfigError", e.what(), 2);
    }

    try {
        rmot::run_command(command, cfg, std::cout);
    } catch (const rmot::ConfigError& e) {
        return fail("ConfigError", e.what(), 2);
    } catch (const rmot::ContractError& e) {
        return fail("ContractError", e.what(), 3);
    } catch (const rmot::CheckpointError& e) {
        return fail("CheckpointError", e.what(), 4);
    } catch (const rmot::SchemaError& e) {
        return fail("SchemaError", e.what(), 5);
    } catch (const rmot::ParseError& e) {
        return fail("ParseError", e.what(), 5);
    } catch (const rmot::NonFiniteLoss& e) {
        return fail("NonFiniteLoss", e.what(), 6);
    } catch (const rmot::VocabularyError& e) {
        return fail("VocabularyError", e.what(), 3);
    } catch (const std::exception& e) {
        return fail("Error", e.what(), 1);
    }
    return 0;
}
