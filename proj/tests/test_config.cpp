#include "doctest.h"

#include "barstream/config.hpp"
#include "barstream/io.hpp"

#include <filesystem>
#include <string>

using namespace barstream;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* leaf) {
    fs::path dir = fs::temp_directory_path() / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_SUITE("config.parse") {

TEST_CASE("key=value lines with comments and blanks") {
    config::Config c = config::parse_config(
        "# run settings\n"
        "\n"
        "seed = 7\n"
        "paths.out_dir= /tmp/run \n"
        "note = a = b\n");
    CHECK(c.get("seed") == "7");
    CHECK(c.get("paths.out_dir") == "/tmp/run");
    CHECK(c.get("note") == "a = b");
    CHECK(c.keys() == std::vector<std::string>{"note", "paths.out_dir", "seed"});
}

TEST_CASE("later assignments win") {
    config::Config c = config::parse_config("k = 1\nk = 2\n");
    CHECK(c.get("k") == "2");
}

TEST_CASE("malformed lines carry the line number") {
    try {
        config::parse_config("ok = 1\nno equals sign\n");
        FAIL("expected ConfigInvalid");
    } catch (const config::ConfigInvalid& e) {
        CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
    CHECK_THROWS_AS(config::parse_config("= value\n"), config::ConfigInvalid);
}

TEST_CASE("include is rejected outside file loading") {
    CHECK_THROWS_AS(config::parse_config("include base.cfg\n"), config::ConfigInvalid);
}

} // TEST_SUITE config.parse

TEST_SUITE("config.typed") {

TEST_CASE("typed getters parse or throw with the key name") {
    config::Config c = config::parse_config(
        "n = 42\nx = 1.5\nyes = true\nno = 0\nbad = forty\n");
    CHECK(c.get_int("n") == 42);
    CHECK(c.get_int_or("missing", 7) == 7);
    CHECK(c.get_double("x") == 1.5);
    CHECK(c.get_double_or("missing", 2.25) == 2.25);
    CHECK(c.get_bool_or("yes", false));
    CHECK_FALSE(c.get_bool_or("no", true));
    CHECK(c.get_bool_or("missing", true));

    CHECK_THROWS_AS(c.get("missing"), config::ConfigInvalid);
    CHECK_THROWS_AS(c.get_int("bad"), config::ConfigInvalid);
    CHECK_THROWS_AS(c.get_int("x"), config::ConfigInvalid);
    CHECK_THROWS_AS(c.get_double("bad"), config::ConfigInvalid);
    CHECK_THROWS_AS(c.get_bool_or("bad", true), config::ConfigInvalid);
    try {
        c.get("missing");
    } catch (const config::ConfigInvalid& e) {
        CHECK(std::string(e.what()).find("missing") != std::string::npos);
    }
}

TEST_CASE("render emits sorted key = value lines") {
    config::Config c;
    c.set("b", "2");
    c.set("a", "1");
    CHECK(c.render() == "a = 1\nb = 2\n");
    CHECK(config::parse_config(c.render()).render() == c.render());
}

} // TEST_SUITE config.typed

TEST_SUITE("config.include") {

TEST_CASE("includes resolve relative to the including file") {
    fs::path dir = temp_dir("bs_cfg_inc");
    io::write_text_file((dir / "base" / "common.cfg").string(),
                        "seed = 1\nmodel.hidden = 64\n");
    io::write_text_file((dir / "run.cfg").string(),
                        "include base/common.cfg\nseed = 9\n");
    config::Config c = config::load_config_file((dir / "run.cfg").string());
    CHECK(c.get("seed") == "9");
    CHECK(c.get("model.hidden") == "64");
    fs::remove_all(dir);
}

TEST_CASE("include order is position-sensitive") {
    fs::path dir = temp_dir("bs_cfg_inc_order");
    io::write_text_file((dir / "late.cfg").string(), "k = from_include\n");
    io::write_text_file((dir / "run.cfg").string(),
                        "k = local\ninclude late.cfg\n");
    CHECK(config::load_config_file((dir / "run.cfg").string()).get("k") == "from_include");
    fs::remove_all(dir);
}

TEST_CASE("include cycles are detected") {
    fs::path dir = temp_dir("bs_cfg_cycle");
    io::write_text_file((dir / "a.cfg").string(), "include b.cfg\n");
    io::write_text_file((dir / "b.cfg").string(), "include a.cfg\n");
    try {
        config::load_config_file((dir / "a.cfg").string());
        FAIL("expected ConfigInvalid");
    } catch (const config::ConfigInvalid& e) {
        CHECK(std::string(e.what()).find("cycle") != std::string::npos);
    }
    io::write_text_file((dir / "self.cfg").string(), "include self.cfg\n");
    CHECK_THROWS_AS(config::load_config_file((dir / "self.cfg").string()),
                    config::ConfigInvalid);
    fs::remove_all(dir);
}

TEST_CASE("a file may be included twice without a cycle") {
    fs::path dir = temp_dir("bs_cfg_diamond");
    io::write_text_file((dir / "leaf.cfg").string(), "k = leaf\n");
    io::write_text_file((dir / "mid.cfg").string(), "include leaf.cfg\n");
    io::write_text_file((dir / "run.cfg").string(),
                        "include leaf.cfg\ninclude mid.cfg\n");
    CHECK(config::load_config_file((dir / "run.cfg").string()).get("k") == "leaf");
    fs::remove_all(dir);
}

TEST_CASE("missing include target names the file") {
    fs::path dir = temp_dir("bs_cfg_missing");
    io::write_text_file((dir / "run.cfg").string(), "include ghost.cfg\n");
    CHECK_THROWS_AS(config::load_config_file((dir / "run.cfg").string()),
                    config::ConfigInvalid);
    fs::remove_all(dir);
}

} // TEST_SUITE config.include
