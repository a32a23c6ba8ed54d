#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "encodenet/checkpoint.hpp"
#include "encodenet/datasets.hpp"
#include "encodenet/model_spec.hpp"
#include "encodenet/network.hpp"
#include "encodenet/trainer.hpp"

using namespace encodenet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "encodenet_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kSpec = "name ck\ninput 1 8 8\nconv 4 3 1 same\nbatchnorm\nrelu\nmaxpool\nflatten\ndense 2\nsoftmax\n";

Network trained_net() {
  Network net(parse_model_spec(kSpec), 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  train_classifier(net, make_blob_images(16, 4, 8, 0.05, 1), cfg);
  return net;
}

CheckpointError::Reason reason_of(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.reason();
  }
  FAIL("no CheckpointError");
  return CheckpointError::Reason::io;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact, running stats included") {
  const fs::path dir = scratch("ck");
  Network net = trained_net();
  save_checkpoint(dir / "m.ckpt", net);
  const Network back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.spec() == net.spec());
  CHECK(back.state() == net.state());
  CHECK(back.trained());

  Network fresh(parse_model_spec(kSpec), 99);
  load_checkpoint_into(dir / "m.ckpt", fresh);
  CHECK(fresh.state() == net.state());
  CHECK(!fs::exists(dir / "m.ckpt.tmp"));
}

TEST_CASE("truncated, corrupted, missing and mismatched checkpoints") {
  const fs::path dir = scratch("ck_bad");
  save_checkpoint(dir / "m.ckpt", trained_net());
  std::ifstream in(dir / "m.ckpt", std::ios::binary);
  std::vector<char> bytes(std::istreambuf_iterator<char>(in), {});
  in.close();

  for (const std::size_t keep : {bytes.size() - 1, bytes.size() / 2, std::size_t{5}}) {
    std::ofstream(dir / "t.ckpt", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(keep));
    CHECK(reason_of(dir / "t.ckpt") == CheckpointError::Reason::corrupt);
  }
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  std::ofstream(dir / "f.ckpt", std::ios::binary).write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  CHECK(reason_of(dir / "f.ckpt") == CheckpointError::Reason::corrupt);

  CHECK(reason_of(dir / "none.ckpt") == CheckpointError::Reason::io);

  Network other(parse_model_spec("name ck\ninput 1 8 8\nconv 8 3 1 same\nrelu\nmaxpool\nflatten\ndense 2\nsoftmax\n"), 1);
  try {
    load_checkpoint_into(dir / "m.ckpt", other);
    FAIL("expected spec mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.reason() == CheckpointError::Reason::spec_mismatch);
  }
}
