#include "resad/model.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace resad {
namespace {

[[noreturn]] void fail(const std::string& what) { throw Error("model", what); }

class Writer {
 public:
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(char((v >> (8 * i)) & 0xffu));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out_.push_back(char((bits >> (8 * i)) & 0xffu));
  }
  template <typename Derived>
  void matrix(const Eigen::MatrixBase<Derived>& m) {
    u32(std::uint32_t(m.rows()));
    u32(std::uint32_t(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) fail("corrupt model file: truncated");
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  Mat matrix(Eigen::Index rows, Eigen::Index cols) {
    if (u32() != rows || u32() != cols) fail("corrupt model file: unexpected matrix shape");
    need(std::size_t(rows * cols) * 8);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
    if (!m.allFinite()) fail("corrupt model file: non-finite parameter");
    return m;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelArtifact::check_compatible(const std::vector<featio::LevelDims>& dims) const {
  if (dims != level_dims) fail("feature dimensions do not match the model");
}

std::string serialize_model(const ModelArtifact& model) {
  const std::size_t L = model.level_dims.size();
  if (model.constraintors.size() != L || model.flows.size() != L) fail("inconsistent artifact");
  Writer w;
  w.bytes(kModelMagic, 8);
  w.u32(kModelVersion);
  const std::string cfg = model.config.to_json();
  w.u32(std::uint32_t(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.u32(std::uint32_t(L));
  for (const auto& d : model.level_dims) {
    w.u32(d.height);
    w.u32(d.width);
    w.u32(d.channels);
  }
  for (const auto& c : model.constraintors) {
    w.matrix(c.weight.value);
    w.matrix(c.bias.value);
    w.matrix(c.gamma.value);
    w.matrix(c.beta.value);
    w.matrix(c.bn.running_mean);
    w.matrix(c.bn.running_var);
    w.f64(c.bn.momentum);
    w.f64(c.bn.eps);
  }
  for (const auto& f : model.flows) {
    w.u32(std::uint32_t(f.num_layers()));
    w.u32(std::uint32_t(f.hidden()));
    w.u32(std::uint32_t(f.pos_dim()));
    w.f64(f.clamp());
    for (const auto& layer : f.layers()) {
      w.matrix(layer.mix);
      w.matrix(layer.w1.value);
      w.matrix(layer.b1.value);
      w.matrix(layer.w2.value);
      w.matrix(layer.b2.value);
    }
    w.matrix(f.output_scale());
  }
  return w.take();
}

ModelArtifact deserialize_model(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(8) != std::string(kModelMagic, 8)) fail("bad magic: not a model file");
  const std::uint32_t version = r.u32();
  if (version != kModelVersion)
    fail("unsupported model version " + std::to_string(version) + " (expected " + std::to_string(kModelVersion) + ")");
  ModelArtifact m;
  const std::uint32_t cfg_len = r.u32();
  m.config = TrainConfig::from_json(r.bytes(cfg_len));
  const std::uint32_t L = r.u32();
  if (L == 0) fail("corrupt model file: no levels");
  for (std::uint32_t l = 0; l < L; ++l) {
    featio::LevelDims d{r.u32(), r.u32(), r.u32()};
    if (d.height == 0 || d.width == 0 || d.channels == 0) fail("corrupt model file: zero dimension");
    m.level_dims.push_back(d);
  }
  for (const auto& d : m.level_dims) {
    const Eigen::Index C = d.channels;
    constraintor::LevelNet<Real> c;
    c.weight = {"constraintor.weight", r.matrix(C, C)};
    c.bias = {"constraintor.bias", r.matrix(1, C)};
    c.gamma = {"constraintor.bn.gamma", r.matrix(1, C)};
    c.beta = {"constraintor.bn.beta", r.matrix(1, C)};
    c.bn.running_mean = r.matrix(1, C).row(0);
    c.bn.running_var = r.matrix(1, C).row(0);
    c.bn.momentum = r.f64();
    c.bn.eps = r.f64();
    m.constraintors.push_back(std::move(c));
  }
  for (const auto& d : m.level_dims) {
    const Eigen::Index C = d.channels;
    const Eigen::Index split = (C + 1) / 2;
    const std::uint32_t n_layers = r.u32();
    const Eigen::Index hidden = r.u32();
    const Eigen::Index pos_dim = r.u32();
    const double clamp = r.f64();
    if (n_layers == 0 || hidden == 0 || !(clamp > 0)) fail("corrupt model file: bad flow header");
    std::vector<flow::Coupling<Real>> layers;
    for (std::uint32_t k = 0; k < n_layers; ++k) {
      flow::Coupling<Real> c;
      c.mix = r.matrix(C, C);
      c.w1 = {"flow.w1", r.matrix(split + pos_dim, hidden)};
      c.b1 = {"flow.b1", r.matrix(1, hidden)};
      c.w2 = {"flow.w2", r.matrix(hidden, 2 * (C - split))};
      c.b2 = {"flow.b2", r.matrix(1, 2 * (C - split))};
      layers.push_back(std::move(c));
    }
    RowVectorX<Real> scale = r.matrix(1, C).row(0);
    m.flows.push_back(flow::FlowLevel<Real>::assemble(C, pos_dim, hidden, clamp, std::move(layers), std::move(scale)));
  }
  if (!r.done()) fail("corrupt model file: trailing bytes");
  return m;
}

void save_model(const ModelArtifact& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_model(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), std::streamsize(bytes.size()));
  if (!os) fail("write failed: " + path.string());
}

ModelArtifact load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open model " + path.string());
  return deserialize_model(std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()));
}

std::uint64_t fingerprint(const ModelArtifact& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : serialize_model(model)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace resad
