#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / ("cstr_cli_" + std::to_string(::getpid()));

struct CliRun {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CliRun cli(const std::string& args) {
  const fs::path out = kRoot / "stdout.txt", err = kRoot / "stderr.txt";
  const std::string cmd =
      std::string("\"") + CSTR_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string without_wall_time(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }
};

const std::string kSmallData = "--set data.n_train=24 --set data.n_eval=8 --set data.lexicon_size=5";

}  // namespace

TEST_F(Cli, NoArgumentsIsUsageError) {
  const CliRun r = cli("");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("gen-data"), std::string::npos);
}

TEST_F(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(cli("train --bogus").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("eval").code, 2);
}

TEST_F(Cli, RuntimeFailureIsStructured) {
  const CliRun r = cli("--set train.stepz=1 train --data " + (kRoot / "nowhere").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("\"error\""), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("stepz"), std::string::npos) << r.err;
  fs::create_directories(kRoot / "empty_results");
  EXPECT_EQ(cli("report --results " + (kRoot / "empty_results").string()).code, 1);
}

TEST_F(Cli, IdenticalRunsProduceIdenticalMetrics) {
  const std::string data = (kRoot / "data").string();
  ASSERT_EQ(cli("--seed 3 " + kSmallData + " gen-data --out " + data).code, 0);
  EXPECT_TRUE(fs::exists(kRoot / "data" / "manifest.tsv"));
  for (const char* run : {"run_a", "run_b"}) {
    const CliRun r = cli("--seed 3 --set train.batch=4 --set train.eval_every=2 train --data " + data + " --out " +
                      (kRoot / run).string() + " --steps 4");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const std::string a = slurp(kRoot / "run_a" / "metrics.csv"), b = slurp(kRoot / "run_b" / "metrics.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(without_wall_time(a), without_wall_time(b));
  EXPECT_EQ(slurp(kRoot / "run_a" / "final.bin"), slurp(kRoot / "run_b" / "final.bin"));

  const CliRun ev = cli("eval --data " + data + " --checkpoint " + (kRoot / "run_a" / "final.bin").string());
  EXPECT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("accuracy"), std::string::npos) << ev.out;
  const CliRun dec =
      cli("decode " + (kRoot / "data" / "eval" / "000000.pgm").string() + " --checkpoint " +
          (kRoot / "run_a" / "final.bin").string());
  EXPECT_EQ(dec.code, 0) << dec.err;
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  std::ofstream(kRoot / "cfg.ini") << "[data]\nn_train = 6\nn_eval = 2\nlexicon_size = 3\n";
  const std::string data = (kRoot / "cfgdata").string();
  ASSERT_EQ(cli("--config " + (kRoot / "cfg.ini").string() + " --set data.n_eval=3 gen-data --out " + data).code, 0);
  std::istringstream manifest(slurp(kRoot / "cfgdata" / "manifest.tsv"));
  int train = 0, eval = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    train += line.find("\ttrain\t") != std::string::npos;
    eval += line.find("\teval\t") != std::string::npos;
  }
  EXPECT_EQ(train, 6);
  EXPECT_EQ(eval, 3);
  EXPECT_EQ(cli("--config " + (kRoot / "missing.ini").string() + " gen-data").code, 2);
}

TEST_F(Cli, GradcheckPassesAndListsFamilies) {
  const CliRun r = cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  for (const char* family : {"conv2d", "ctc_loss", "head_sppn", "non_local", "fpn", "toy_model_ce"}) {
    EXPECT_NE(r.out.find(family), std::string::npos) << family << "\n" << r.out;
  }
}
