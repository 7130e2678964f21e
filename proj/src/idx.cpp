#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "abc/errors.hpp"
#include "abc/factor_model.hpp"

namespace abc {
namespace {

constexpr std::uint8_t kUnsignedByte = 0x08;

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::size_t data_offset = 0;
  std::vector<std::uint8_t> bytes;
};

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

IdxFile parse_idx(const std::string& path, std::size_t expected_dims) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open IDX file '" + path + "'", 0);
  IdxFile f;
  f.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const auto& b = f.bytes;
  if (b.size() < 4) throw ParseError("IDX file '" + path + "' is too short for a magic number", b.size());
  if (b[0] != 0 || b[1] != 0) throw ParseError("IDX magic must start with two zero bytes", b[0] != 0 ? 0 : 1);
  if (b[2] != kUnsignedByte) throw ParseError("IDX element type must be unsigned byte (0x08)", 2);
  if (b[3] != expected_dims) {
    throw ParseError("IDX file has " + std::to_string(b[3]) + " dimensions, expected " +
                         std::to_string(expected_dims),
                     3);
  }
  const std::size_t header = 4 + 4 * expected_dims;
  if (b.size() < header) throw ParseError("IDX header truncated", b.size());
  std::size_t count = 1;
  for (std::size_t d = 0; d < expected_dims; ++d) {
    f.dims.push_back(read_be32(b, 4 + 4 * d));
    count *= f.dims.back();
  }
  f.data_offset = header;
  if (b.size() != header + count) {
    throw ParseError("IDX payload holds " + std::to_string(b.size() - header) + " bytes, header declares " +
                         std::to_string(count),
                     std::min(b.size(), header + count));
  }
  return f;
}

}  // namespace

std::vector<Image> read_idx_images(const std::string& path) {
  const IdxFile f = parse_idx(path, 3);
  const int n = static_cast<int>(f.dims[0]);
  const int rows = static_cast<int>(f.dims[1]);
  const int cols = static_cast<int>(f.dims[2]);
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(n));
  std::size_t at = f.data_offset;
  for (int i = 0; i < n; ++i) {
    Image img(rows, cols, 1);
    for (float& p : img.pixels) p = static_cast<float>(f.bytes[at++]) / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<int> read_idx_labels(const std::string& path) {
  const IdxFile f = parse_idx(path, 1);
  return {f.bytes.begin() + static_cast<std::ptrdiff_t>(f.data_offset), f.bytes.end()};
}

IdxIngest ingest_idx_images(const std::string& images_path, const std::string& labels_path,
                            std::optional<int> withheld_label, const std::string& domain_tag) {
  std::vector<Image> images = read_idx_images(images_path);
  const std::vector<int> labels = read_idx_labels(labels_path);
  if (labels.size() != images.size()) {
    throw ParseError("label count " + std::to_string(labels.size()) + " differs from image count " +
                         std::to_string(images.size()),
                     4);
  }
  const int classes = labels.empty() ? 2 : std::max(2, *std::max_element(labels.begin(), labels.end()) + 1);
  FactorSpec spec({{"label", DiscreteDomain{classes}}});

  IdxIngest result;
  std::vector<Observation> kept;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Observation obs;
    obs.image = std::move(images[i]);
    obs.source_latent = LatentCode{{static_cast<double>(labels[i])}, {FactorRole::active}};
    obs.domain_tag = domain_tag;
    if (withheld_label && labels[i] == *withheld_label) {
      result.withheld.push_back(std::move(obs));
    } else {
      kept.push_back(std::move(obs));
    }
  }
  result.dataset = std::make_shared<ListDataset>(std::move(spec), std::move(kept));
  return result;
}

}  // namespace abc
