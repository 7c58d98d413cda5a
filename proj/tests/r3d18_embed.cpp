// Embeds one clip with the residual backbone and imported weights.
// Usage: r3d18_embed WEIGHTS CLIP.f32 T H W OUT.f64

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <vector>

#include "mvl/nn/backbone.hpp"
#include "mvl/weights.hpp"

int main(int argc, char** argv) {
  if (argc != 7) {
    std::fprintf(stderr, "usage: r3d18_embed WEIGHTS CLIP.f32 T H W OUT.f64\n");
    return 2;
  }
  using namespace mvl;
  nn::BackboneConfig cfg;
  cfg.variant = nn::BackboneVariant::residual3d_18_pretrained;
  cfg.embed_dim = 512;
  auto bb = nn::make_backbone<double>(cfg);
  nn::ParamList<double> params;
  bb->parameters(params);
  load_weights(argv[1], params);

  const Shape shape{1, 3, std::strtoul(argv[3], nullptr, 10), std::strtoul(argv[4], nullptr, 10),
                    std::strtoul(argv[5], nullptr, 10)};
  Tensor<double> clip(shape);
  std::vector<float> raw(clip.size());
  std::ifstream in(argv[2], std::ios::binary);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!in) {
    std::fprintf(stderr, "cannot read %zu floats from %s\n", raw.size(), argv[2]);
    return 4;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) clip[i] = raw[i];
  const Tensor<double> emb = bb->forward(clip, nullptr);
  std::ofstream out(argv[6], std::ios::binary);
  out.write(reinterpret_cast<const char*>(emb.data()), static_cast<std::streamsize>(emb.size() * sizeof(double)));
  return out ? 0 : 4;
}
