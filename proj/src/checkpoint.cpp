#include "hourglass/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace hourglass {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace {

constexpr char kCheckpointMagic[8] = {'H', 'G', 'A', 'V', 'C', 'K', 'P', 'T'};
constexpr char kTensorMagic[8] = {'H', 'G', 'T', 'E', 'N', 'S', 'O', 'R'};

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("truncated file: " + path);
  return value;
}

void write_blob(std::ofstream& out, const std::string& name, std::span<const double> values,
                const Shape& shape) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) write_pod<int64_t>(out, d);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
  for (const auto& [blob_name, tensor] : blobs)
    if (blob_name == name) return &tensor;
  return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<uint32_t>(out, data.version);
  write_pod<uint64_t>(out, data.config_hash);
  write_pod<uint64_t>(out, data.step);
  write_pod<uint32_t>(out, static_cast<uint32_t>(data.blobs.size()));
  for (const auto& [name, tensor] : data.blobs) write_blob(out, name, tensor.values(), tensor.shape());
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

CheckpointData load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  CheckpointData data;
  data.version = read_pod<uint32_t>(in, path);
  if (data.version != 1) throw IoError("unsupported checkpoint version in " + path);
  data.config_hash = read_pod<uint64_t>(in, path);
  data.step = read_pod<uint64_t>(in, path);
  const uint32_t count = read_pod<uint32_t>(in, path);
  data.blobs.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint32_t ndim = read_pod<uint32_t>(in, path);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_pod<int64_t>(in, path);
    std::vector<double> values(static_cast<size_t>(numel(shape)));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IoError("truncated blob " + name + " in " + path);
    data.blobs.emplace_back(std::move(name), Tensor::from_values(std::move(shape), std::move(values)));
  }
  return data;
}

LoadReport apply_checkpoint(const CheckpointData& data, ParamStore& params, LoadPolicy policy) {
  std::map<std::string, const Tensor*> source;
  for (const auto& [name, tensor] : data.blobs) source[name] = &tensor;

  LoadReport report;
  for (auto& [name, param] : params.items_mutable()) {
    auto it = source.find(name);
    if (it == source.end()) {
      report.fresh_target.push_back(name);
      continue;
    }
    const Tensor& blob = *it->second;
    if (blob.shape() != param.shape())
      throw IoError(detail::concat_msg("checkpoint blob '", name, "' has shape ",
                                       shape_str(blob.shape()), " but the model expects ",
                                       shape_str(param.shape())));
    auto dst = param.mutable_values();
    std::copy_n(blob.values().data(), blob.values().size(), dst.data());
    report.copied.push_back(name);
    source.erase(it);
  }
  for (const auto& [name, tensor] : source) {
    (void)tensor;
    if (name.rfind("opt.", 0) == 0) continue;  // optimizer state is applied separately
    report.skipped_source.push_back(name);
  }

  if (policy == LoadPolicy::kStrict) {
    if (!report.fresh_target.empty())
      throw IoError("strict load: parameter '" + report.fresh_target.front() +
                    "' missing from checkpoint");
    if (!report.skipped_source.empty())
      throw IoError("strict load: checkpoint blob '" + report.skipped_source.front() +
                    "' has no matching parameter");
  }
  return report;
}

void write_tensor_file(const std::string& path, std::span<const double> values,
                       const Shape& shape) {
  check_shape(numel(shape) == static_cast<int64_t>(values.size()),
              "tensor file: value count does not match shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open tensor file for writing: " + path);
  out.write(kTensorMagic, sizeof(kTensorMagic));
  write_pod<uint32_t>(out, static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) write_pod<int64_t>(out, d);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw IoError("failed writing tensor file: " + path);
}

std::pair<Shape, std::vector<double>> read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0)
    throw IoError("not a tensor file: " + path);
  const uint32_t ndim = read_pod<uint32_t>(in, path);
  Shape shape(ndim);
  for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_pod<int64_t>(in, path);
  std::vector<double> values(static_cast<size_t>(numel(shape)));
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) throw IoError("truncated tensor file: " + path);
  return {std::move(shape), std::move(values)};
}

}  // namespace hourglass
