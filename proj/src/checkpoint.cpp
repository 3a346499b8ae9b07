#include "m2d/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "m2d/errors.hpp"

namespace m2d {
namespace {

constexpr char kMagic[8] = {'M', '2', 'D', 'C', 'K', 'P', 'T', '\0'};

uint64_t fnv1a(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

// Sequential bounds-checked reader; any overrun means the file was cut short.
struct Reader {
  const std::string& bytes;
  size_t pos = 0;

  template <typename T>
  T take() {
    if (pos + sizeof(T) > bytes.size()) throw IoError("truncated checkpoint");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  std::string take_str(size_t n) {
    if (pos + n > bytes.size()) throw IoError("truncated checkpoint");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const Matrix* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put<uint32_t>(out, data.version);
  put<int64_t>(out, data.step);
  put<uint32_t>(out, static_cast<uint32_t>(data.config_json.size()));
  out += data.config_json;
  put<uint32_t>(out, static_cast<uint32_t>(data.tensors.size()));
  for (const auto& [name, m] : data.tensors) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out += name;
    put<uint32_t>(out, static_cast<uint32_t>(m.rows()));
    put<uint32_t>(out, static_cast<uint32_t>(m.cols()));
    for (long i = 0; i < m.rows(); ++i)
      for (long j = 0; j < m.cols(); ++j) put<double>(out, m(i, j));
  }
  put<uint64_t>(out, fnv1a(out));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(kMagic) + 8) throw IoError("truncated checkpoint");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad checkpoint magic in " + path);
  std::string body = bytes.substr(0, bytes.size() - 8);
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(body) != stored) throw IoError("checkpoint checksum mismatch in " + path);

  Reader r{body};
  r.pos = sizeof(kMagic);
  CheckpointData data;
  data.version = r.take<uint32_t>();
  if (data.version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(data.version) +
                  " (expected " + std::to_string(kCheckpointVersion) + ")");
  data.step = static_cast<long>(r.take<int64_t>());
  data.config_json = r.take_str(r.take<uint32_t>());
  uint32_t n_tensors = r.take<uint32_t>();
  data.tensors.reserve(n_tensors);
  for (uint32_t k = 0; k < n_tensors; ++k) {
    std::string name = r.take_str(r.take<uint32_t>());
    uint32_t rows = r.take<uint32_t>();
    uint32_t cols = r.take<uint32_t>();
    Matrix m(rows, cols);
    for (uint32_t i = 0; i < rows; ++i)
      for (uint32_t j = 0; j < cols; ++j) m(i, j) = r.take<double>();
    data.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (r.pos != body.size()) throw IoError("trailing bytes in checkpoint " + path);
  return data;
}

CheckpointData snapshot_state(long step, const std::string& config_json,
                              OnlineState& online, TargetState& target,
                              MapperParams* mapper, AdamW* opt) {
  CheckpointData ckpt;
  ckpt.step = step;
  ckpt.config_json = config_json;
  visit_params(online, [&](const std::string& name, Matrix& m) {
    ckpt.tensors.emplace_back("online." + name, m);
  });
  visit_params(target, [&](const std::string& name, Matrix& m) {
    ckpt.tensors.emplace_back("target." + name, m);
  });
  if (mapper) {
    ckpt.tensors.emplace_back("mapper.w", mapper->lin.w);
    ckpt.tensors.emplace_back("mapper.b", mapper->lin.b);
  }
  if (opt)
    opt->visit_state([&](const std::string& name, Matrix& m) {
      ckpt.tensors.emplace_back(name, m);
    });
  return ckpt;
}

namespace {

void restore_one(const CheckpointData& ckpt, const std::string& name, Matrix& dst) {
  const Matrix* src = ckpt.find(name);
  if (!src) throw ConsistencyError("checkpoint missing tensor " + name);
  if (src->rows() != dst.rows() || src->cols() != dst.cols())
    throw ConsistencyError("checkpoint tensor " + name + " is " + std::to_string(src->rows()) +
                           "x" + std::to_string(src->cols()) + ", model expects " +
                           std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
  dst = *src;
}

}  // namespace

void restore_state(const CheckpointData& ckpt, OnlineState& online, TargetState& target,
                   MapperParams* mapper, AdamW* opt) {
  visit_params(online, [&](const std::string& name, Matrix& m) {
    restore_one(ckpt, "online." + name, m);
  });
  visit_params(target, [&](const std::string& name, Matrix& m) {
    restore_one(ckpt, "target." + name, m);
  });
  if (mapper) {
    restore_one(ckpt, "mapper.w", mapper->lin.w);
    restore_one(ckpt, "mapper.b", mapper->lin.b);
  }
  if (opt) {
    opt->visit_state([&](const std::string& name, Matrix& m) {
      restore_one(ckpt, name, m);
    });
    opt->set_completed_steps(ckpt.step);
  }
}

}  // namespace m2d
