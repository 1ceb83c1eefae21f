#include "u2o/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint code assumes a little-endian host");

namespace u2o::nn {

void Params::set_zero() {
  for (auto& m : w) m.setZero();
  for (auto& v : b) v.setZero();
}

Params init_params(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.widths.size() < 2) throw Error("MLP needs at least one layer");
  for (int d : spec.widths)
    if (d <= 0) throw Error("MLP widths must be positive");
  Params p;
  int L = spec.layers();
  p.w.resize(L);
  p.b.resize(L);
  for (int l = 0; l < L; ++l) {
    int fan_in = spec.widths[l];
    int fan_out = spec.widths[l + 1];
    rng::Stream st(rng::derive(seed, static_cast<std::uint64_t>(l)));
    double bound = std::sqrt(6.0 / fan_in);
    p.w[l].resize(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) p.w[l](r, c) = st.uniform(-bound, bound);
    p.b[l] = Eigen::VectorXd::Zero(fan_out);
  }
  return p;
}

Params zeros_like(const Params& p) {
  Params out;
  out.w.reserve(p.w.size());
  out.b.reserve(p.b.size());
  for (const auto& m : p.w) out.w.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  for (const auto& v : p.b) out.b.push_back(Eigen::VectorXd::Zero(v.size()));
  return out;
}

const Eigen::MatrixXd& forward(const MlpSpec& spec, const Params& p, const Eigen::MatrixXd& X,
                               Cache& cache) {
  int L = spec.layers();
  if (X.rows() != spec.in_dim()) throw Error("forward: input dim mismatch");
  cache.z.resize(L);
  cache.a.resize(L + 1);
  cache.a[0] = X;
  for (int l = 0; l < L; ++l) {
    cache.z[l].noalias() = p.w[l] * cache.a[l];
    cache.z[l].colwise() += p.b[l];
    if (l + 1 < L) {
      if (spec.hidden == Act::relu) cache.a[l + 1] = cache.z[l].cwiseMax(0.0);
      else cache.a[l + 1] = cache.z[l].array().tanh();
    } else {
      if (spec.output == OutAct::identity) cache.a[l + 1] = cache.z[l];
      else cache.a[l + 1] = cache.z[l].array().tanh();
    }
  }
  return cache.a.back();
}

Eigen::VectorXd forward1(const MlpSpec& spec, const Params& p, const Eigen::VectorXd& x) {
  Cache cache;
  return forward(spec, p, x, cache).col(0);
}

FeatureResult forward_with_features(const MlpSpec& spec, const Params& p,
                                    const Eigen::MatrixXd& X) {
  if (spec.layers() < 2)
    throw NoPenultimateLayer("network has no hidden layer to expose as features");
  Cache cache;
  forward(spec, p, X, cache);
  FeatureResult out;
  out.features = cache.a[spec.layers() - 1];
  out.output = cache.a[spec.layers()];
  return out;
}

void backward(const MlpSpec& spec, const Params& p, const Cache& cache, const Eigen::MatrixXd& dY,
              Params& grad, Eigen::MatrixXd* dX) {
  int L = spec.layers();
  if (grad.w.size() != static_cast<std::size_t>(L)) grad = zeros_like(p);
  Eigen::MatrixXd delta;
  if (spec.output == OutAct::identity) delta = dY;
  else delta = dY.array() * (1.0 - cache.a[L].array().square());
  for (int l = L - 1; l >= 0; --l) {
    grad.w[l].noalias() += delta * cache.a[l].transpose();
    grad.b[l] += delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = p.w[l].transpose() * delta;
      if (spec.hidden == Act::relu)
        delta = back.array() * (cache.z[l - 1].array() > 0.0).cast<double>();
      else
        delta = back.array() * (1.0 - cache.a[l].array().square());
    } else if (dX) {
      dX->noalias() = p.w[0].transpose() * delta;
    }
  }
}

Adam::Adam(const Params& shape, AdamConfig cfg) : cfg_(cfg), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

void Adam::step(Params& p, const Params& grad) {
  if (m_.w.size() != p.w.size()) throw Error("Adam state does not match parameters");
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto update = [&](Eigen::Ref<Eigen::MatrixXd> x, const Eigen::Ref<const Eigen::MatrixXd>& g,
                    Eigen::Ref<Eigen::MatrixXd> m, Eigen::Ref<Eigen::MatrixXd> v) {
    m.array() = cfg_.beta1 * m.array() + (1.0 - cfg_.beta1) * g.array();
    v.array() = cfg_.beta2 * v.array() + (1.0 - cfg_.beta2) * g.array().square();
    x.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  };
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    update(p.w[l], grad.w[l], m_.w[l], v_.w[l]);
    update(p.b[l], grad.b[l], m_.b[l], v_.b[l]);
  }
}

void polyak_update(Params& target, const Params& online, double rho) {
  if (target.w.size() != online.w.size()) throw Error("polyak: mismatched parameter shapes");
  // Incremental form: a target that already equals the online net stays put
  // bit for bit, so zero-lr updates are true no-ops.
  for (std::size_t l = 0; l < target.w.size(); ++l) {
    target.w[l] += rho * (online.w[l] - target.w[l]);
    target.b[l] += rho * (online.b[l] - target.b[l]);
  }
}

// --- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'U', '2', 'O', '1'};

void put_u32(std::ostream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

bool get_u32(std::istream& f, std::uint32_t& v) {
  return static_cast<bool>(f.read(reinterpret_cast<char*>(&v), 4));
}

void write_tensor(std::ostream& f, const std::string& name,
                  const Eigen::Ref<const Eigen::MatrixXd>& t, bool is_matrix) {
  put_u32(f, static_cast<std::uint32_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  if (is_matrix) {
    put_u32(f, 2);
    put_u32(f, static_cast<std::uint32_t>(t.rows()));
    put_u32(f, static_cast<std::uint32_t>(t.cols()));
  } else {
    put_u32(f, 1);
    put_u32(f, static_cast<std::uint32_t>(t.rows()));
  }
  std::vector<float> buf;
  buf.reserve(static_cast<std::size_t>(t.size()));
  for (Eigen::Index r = 0; r < t.rows(); ++r)  // row-major payload
    for (Eigen::Index c = 0; c < t.cols(); ++c) buf.push_back(static_cast<float>(t(r, c)));
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Params*>>& nets) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(kMagic, 4);
  for (const auto& [name, p] : nets) {
    for (std::size_t l = 0; l < p->w.size(); ++l) {
      write_tensor(f, name + "/w" + std::to_string(l), p->w[l], true);
      write_tensor(f, name + "/b" + std::to_string(l), p->b[l], false);
    }
  }
  if (!f) throw Error("write failed: " + path);
}

void load_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Params*>>& nets) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("bad checkpoint magic: " + path);

  struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
  };
  std::map<std::string, Tensor> tensors;
  std::uint32_t name_len;
  while (get_u32(f, name_len)) {
    if (name_len > 1 << 16) throw Error("corrupt checkpoint (name length): " + path);
    std::string name(name_len, '\0');
    if (!f.read(name.data(), name_len)) throw Error("truncated checkpoint: " + path);
    std::uint32_t rank;
    if (!get_u32(f, rank) || rank < 1 || rank > 2)
      throw Error("corrupt checkpoint (rank): " + path);
    Tensor t;
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint32_t dim;
      if (!get_u32(f, dim)) throw Error("truncated checkpoint: " + path);
      t.dims.push_back(dim);
      count *= dim;
    }
    t.data.resize(count);
    if (!f.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(count * sizeof(float))))
      throw Error("truncated checkpoint: " + path);
    tensors.emplace(std::move(name), std::move(t));
  }

  for (const auto& [name, p] : nets) {
    for (std::size_t l = 0; l < p->w.size(); ++l) {
      auto wi = tensors.find(name + "/w" + std::to_string(l));
      auto bi = tensors.find(name + "/b" + std::to_string(l));
      if (wi == tensors.end() || bi == tensors.end())
        throw Error("checkpoint missing tensors for net: " + name);
      const Tensor& wt = wi->second;
      const Tensor& bt = bi->second;
      auto& w = p->w[l];
      auto& b = p->b[l];
      if (wt.dims.size() != 2 || static_cast<Eigen::Index>(wt.dims[0]) != w.rows() ||
          static_cast<Eigen::Index>(wt.dims[1]) != w.cols())
        throw Error("checkpoint shape mismatch: " + name + "/w" + std::to_string(l));
      if (bt.dims.size() != 1 || static_cast<Eigen::Index>(bt.dims[0]) != b.size())
        throw Error("checkpoint shape mismatch: " + name + "/b" + std::to_string(l));
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<double>(wt.data[k++]);
      for (Eigen::Index r = 0; r < b.size(); ++r) b[r] = static_cast<double>(bt.data[r]);
    }
  }
}

}  // namespace u2o::nn
