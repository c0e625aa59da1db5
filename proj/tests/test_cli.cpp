#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "blankfill/checkpoint.hpp"
#include "blankfill/vocab.hpp"
#include "support.hpp"

using namespace blankfill;

namespace {

const std::string kCli = BLANKFILL_CLI_PATH;
const std::string kData = BLANKFILL_TEST_DATA;

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

Result run(const testing::TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.path.string() + "' && '" + kCli + "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (const char c : s) n += c == '\n' ? 1 : 0;
  return n;
}

/// Corpus, vocab and a base config for short pretraining runs.
struct Workspace {
  testing::TempDir dir{"cli"};

  Workspace() {
    write(dir / "corpus.txt", testing::synthetic_corpus(16, 30, 8, 12, 3));
    REQUIRE(run(dir, "build-vocab --corpus corpus.txt --out vocab.txt --max-size 64").code == 0);
    write(dir / "base.cfg",
          "corpus=corpus.txt\nvocab=vocab.txt\nsteps=12\nwarmup=2\nbatch=4\nhidden=16\nheads=2\n"
          "max-seq-len=32\ndropout=0\nattention-dropout=0\ndeterministic=true\n");
  }
};

}  // namespace

TEST_CASE("build-vocab reproduces the golden vocab") {
  testing::TempDir dir("cli-vocab");
  const auto r = run(dir, "build-vocab --corpus '" + kData + "/fixture_corpus.txt' --out v.txt --max-size 12");
  REQUIRE(r.code == 0);
  CHECK(slurp(dir / "v.txt") == slurp(kData + "/fixture_vocab.golden"));
  CHECK(slurp(dir / "v.txt.config").find("max-size=12\n") != std::string::npos);
}

TEST_CASE("exit codes") {
  testing::TempDir dir("cli-exit");
  const auto missing = run(dir, "build-vocab --corpus no_such.txt --out v.txt");
  CHECK(missing.code == 3);
  CHECK(missing.err.find("no_such.txt") != std::string::npos);
  CHECK(run(dir, "build-vocab --corpus '" + kData + "/fixture_corpus.txt' --out v.txt --max-size 4").code == 2);
  CHECK(run(dir, "build-vocab --corpus '" + kData + "/fixture_corpus.txt' --out v.txt --bogus 1").code == 2);
  CHECK(run(dir, "build-vocab --corpus '" + kData + "/fixture_corpus.txt' --out missing_dir/v.txt").code == 3);
  CHECK(run(dir, "").code == 2);
  CHECK(run(dir, "--help").code == 0);
  write(dir / "bad.ckpt", "not a checkpoint");
  CHECK(run(dir, "infill --checkpoint bad.ckpt --vocab '" + kData + "/fixture_vocab.golden' --text x").code == 2);
}

TEST_CASE("pretrain is deterministic and records its flags") {
  Workspace ws;
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint a.ckpt").code == 0);
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint b.ckpt").code == 0);
  CHECK(slurp(ws.dir / "a.ckpt.csv") == slurp(ws.dir / "b.ckpt.csv"));
  CHECK(slurp(ws.dir / "a.ckpt") == slurp(ws.dir / "b.ckpt"));
  CHECK(count_lines(slurp(ws.dir / "a.ckpt.csv")) == 13);

  const auto r = run(ws.dir, "pretrain --config base.cfg --checkpoint nopos2.ckpt --use-pos2=false");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("final loss") != std::string::npos);
  const auto ckpt = load_checkpoint<float>(ws.dir / "nopos2.ckpt");
  CHECK_FALSE(ckpt.model.config().use_pos2);
  CHECK(ckpt.metadata.at("corrupt.objective") == "short");
}

TEST_CASE("flags override the config file, which overrides defaults") {
  Workspace ws;
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint a.ckpt --steps 5").code == 0);
  CHECK(count_lines(slurp(ws.dir / "a.ckpt.csv")) == 6);
  const std::string echoed = slurp(ws.dir / "a.ckpt.config");
  CHECK(echoed.find("steps=5\n") != std::string::npos);
  CHECK(echoed.find("hidden=16\n") != std::string::npos);
  CHECK(echoed.find("layers=2\n") != std::string::npos);

  // the echoed config reproduces the run
  CHECK(echoed.find("metrics=a.ckpt.csv\n") != std::string::npos);
  REQUIRE(run(ws.dir, "pretrain --config a.ckpt.config --checkpoint b.ckpt --metrics b.csv").code == 0);
  CHECK(slurp(ws.dir / "a.ckpt.csv") == slurp(ws.dir / "b.csv"));
  CHECK(slurp(ws.dir / "a.ckpt") == slurp(ws.dir / "b.ckpt"));

  write(ws.dir / "broken.cfg", "steps 5\n");
  CHECK(run(ws.dir, "pretrain --config broken.cfg --checkpoint c.ckpt").code == 2);
  CHECK(run(ws.dir, "pretrain --config none.cfg --checkpoint c.ckpt").code == 3);
}

TEST_CASE("split run with resume matches the uninterrupted run") {
  Workspace ws;
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint full.ckpt").code == 0);
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint part.ckpt --stop-after 5").code == 0);
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint part.ckpt --resume").code == 0);
  CHECK(slurp(ws.dir / "full.ckpt") == slurp(ws.dir / "part.ckpt"));
  CHECK(slurp(ws.dir / "full.ckpt.csv") == slurp(ws.dir / "part.ckpt.csv"));
  CHECK(run(ws.dir, "pretrain --config base.cfg --checkpoint part.ckpt --resume --hidden 32").code == 2);
}

TEST_CASE("pretrain rejects conflicting flags up front") {
  Workspace ws;
  const auto sentinel = run(ws.dir, "pretrain --config base.cfg --checkpoint s.ckpt --sentinel-mode=true");
  CHECK(sentinel.code == 2);
  CHECK(sentinel.err.find("sentinel") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(ws.dir / "s.ckpt"));
  CHECK(run(ws.dir, "pretrain --config base.cfg --checkpoint s.ckpt --max-pos2 4").code == 2);
  CHECK(run(ws.dir, "pretrain --config base.cfg --checkpoint s.ckpt --objective words").code == 2);

  REQUIRE(run(ws.dir, "build-vocab --corpus corpus.txt --out vs.txt --max-size 80 --sentinels 5").code == 0);
  CHECK(run(ws.dir, "pretrain --config base.cfg --vocab vs.txt --checkpoint s.ckpt --sentinel-mode=true").code == 0);
}

TEST_CASE("numeric failure exits 4 with the step") {
  Workspace ws;
  const auto r = run(ws.dir, "pretrain --config base.cfg --checkpoint n.ckpt --lr 1e30 --clip 1e30");
  CHECK(r.code == 4);
  CHECK(r.err.find("step ") != std::string::npos);
}

TEST_CASE("score and eval on hand-built checkpoints") {
  testing::TempDir dir("cli-score");
  const Vocab v = Vocab::build_from_text("it was good bad the movie w1 w2 w3 .", 32);
  v.save(dir / "vocab.txt");
  save_checkpoint(dir / "uniform.ckpt", testing::constant_model<float>(testing::tiny_config(v.size())));
  write(dir / "pattern.txt", "{input} . it was ___ .\npos\tgood\nneg\tbad\n");

  const auto s = run(dir, "score --checkpoint uniform.ckpt --vocab vocab.txt --pattern pattern.txt --text 'the movie'");
  REQUIRE(s.code == 0);
  CHECK(s.out == "pos\t0.500000\nneg\t0.500000\n");

  write(dir / "text.txt", "the movie was good . it was bad .\nw1 w2 w3 w1 w2 w3 .\n");
  const auto e = run(dir, "eval ppl --checkpoint uniform.ckpt --vocab vocab.txt --data text.txt --window 8 --overlap 4");
  REQUIRE(e.code == 0);
  CHECK(e.out.starts_with("ppl " + std::to_string(v.size()) + ".000000\n"));
  const auto forced = run(dir, "eval ppl --vocab vocab.txt --data text.txt --window 8 --overlap 4 --force-uniform");
  REQUIRE(forced.code == 0);
  CHECK(forced.out.starts_with("ppl " + std::to_string(v.size()) + ".000000\n"));

  save_checkpoint(dir / "w3.ckpt", testing::constant_model<float>(testing::tiny_config(v.size()), *v.find("w3")));
  write(dir / "passages.txt", "w1 w2 w3\nw1 w2 good\n");
  const auto lw = run(dir, "eval lastword --checkpoint w3.ckpt --vocab vocab.txt --data passages.txt");
  REQUIRE(lw.code == 0);
  CHECK(lw.out.starts_with("accuracy 0.500000\n"));
}

TEST_CASE("infill prints one JSON record per blank") {
  testing::TempDir dir("cli-infill");
  const Vocab v = Vocab::build_from_text("w1 w2 w3 .", 32);
  v.save(dir / "vocab.txt");
  save_checkpoint(dir / "w3.ckpt", testing::constant_model<float>(testing::tiny_config(v.size()), *v.find("w3")));
  const auto r = run(dir, "infill --checkpoint w3.ckpt --vocab vocab.txt --text 'w1 [MASK] w2 [MASK] .' --max-blank-len 3");
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  std::size_t i = 0;
  while (std::getline(lines, line)) {
    const auto rec = nlohmann::json::parse(line);
    CHECK(rec.at("blank_index") == i);
    CHECK(rec.at("tokens") == nlohmann::json::array({"w3", "w3", "w3"}));
    CHECK(rec.at("text") == "w3 w3 w3");
    CHECK(rec.at("logprob").get<double>() < 0.0);
    CHECK(rec.at("truncated") == true);
    ++i;
  }
  CHECK(i == 2);
  CHECK(run(dir, "infill --checkpoint w3.ckpt --vocab vocab.txt --text w1 --max-blank-len 40").code == 2);

  const auto a = run(dir, "infill --checkpoint w3.ckpt --vocab vocab.txt --text w1 --strategy topk --top-k 3 --seed 9");
  const auto b = run(dir, "infill --checkpoint w3.ckpt --vocab vocab.txt --text w1 --strategy topk --top-k 3 --seed 9");
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
}

TEST_CASE("finetune writes a checkpoint for both modes") {
  Workspace ws;
  REQUIRE(run(ws.dir, "pretrain --config base.cfg --checkpoint p.ckpt").code == 0);
  write(ws.dir / "pattern.txt", "{input} ___ .\npos\tw1\nneg\tw2\n");
  write(ws.dir / "cloze.tsv", "w3 w4\tpos\nw5 w6\tneg\n");
  write(ws.dir / "pairs.tsv", "w3 w4\tw4 w3\nw5 w6\tw6 w5\n");
  const std::string common = " --checkpoint p.ckpt --vocab vocab.txt --steps 6 --warmup 1 --batch 2 --deterministic";
  REQUIRE(run(ws.dir, "finetune cloze --pattern pattern.txt --data cloze.tsv --out c.ckpt --metrics c.csv" + common).code == 0);
  CHECK(load_checkpoint<float>(ws.dir / "c.ckpt").metadata.at("finetune.mode") == "cloze");
  CHECK(count_lines(slurp(ws.dir / "c.csv")) == 7);
  REQUIRE(run(ws.dir, "finetune seq2seq --data pairs.tsv --out s.ckpt" + common).code == 0);
  CHECK(load_checkpoint<float>(ws.dir / "s.ckpt").metadata.at("finetune.mode") == "seq2seq");
  CHECK(run(ws.dir, "finetune cloze --data cloze.tsv --out c.ckpt" + common).code == 2);
  CHECK(run(ws.dir, "finetune regression --data cloze.tsv --out c.ckpt" + common).code == 2);
  write(ws.dir / "badlabel.tsv", "w3 w4\tmaybe\n");
  CHECK(run(ws.dir, "finetune cloze --pattern pattern.txt --data badlabel.tsv --out c.ckpt" + common).code == 2);
}
