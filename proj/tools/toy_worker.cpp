// Serves a toy checkpoint over the bridge protocol on stdin/stdout. Accepts
// the same arguments as the pretrained worker so load_pretrained can drive it.

#include <unistd.h>

#include <iostream>

#include "CLI11.hpp"
#include "cellstyle/sd_adapter.hpp"
#include "cellstyle/toy_unet.hpp"

int main(int argc, char** argv) {
  CLI::App app{"toy backbone bridge worker"};
  std::string checkpoint, device = "cpu", model = "cellstyle-toy-v1";
  int latent = 0;
  app.add_option("--checkpoint", checkpoint)->required();
  app.add_option("--device", device);
  app.add_option("--latent-size", latent);
  app.add_option("--model", model, "model name reported to the parent");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto net = cellstyle::ToyUNet::load(checkpoint);
    cellstyle::serve(*net, STDIN_FILENO, STDOUT_FILENO, model);
  } catch (const std::exception& e) {
    std::cerr << "toy worker: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
