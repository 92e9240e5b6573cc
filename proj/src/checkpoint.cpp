#include "dtx/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dtx/errors.hpp"

namespace dtx {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'T', 'X', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string where) : in_(in), where_(std::move(where)) {}
  template <class T>
  T pod() {
    T v{};
    read(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 20)) throw InputError(where_ + ": implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw InputError(where_ + ": truncated checkpoint");
  }

 private:
  std::istream& in_;
  std::string where_;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

Checkpoint snapshot(const ParamStore& store, std::uint64_t config_digest,
                    std::map<std::string, std::string> metadata) {
  Checkpoint c;
  c.config_digest = config_digest;
  c.metadata = std::move(metadata);
  for (const auto& e : store.entries()) c.entries.push_back({e.name, e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()}});
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  Writer w(out);
  out.write(kMagic, sizeof kMagic);
  w.pod(ckpt.version);
  w.pod(ckpt.config_digest);
  w.pod(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  w.pod(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    w.pod(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.pod(static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!out) throw InputError("error while writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw InputError(path.string() + ": not a checkpoint file");
  Checkpoint c;
  c.version = r.pod<std::uint32_t>();
  if (c.version != kCheckpointVersion)
    throw InputError(path.string() + ": unsupported checkpoint version " + std::to_string(c.version));
  c.config_digest = r.pod<std::uint64_t>();
  const auto meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    const auto ndim = r.pod<std::uint32_t>();
    if (ndim == 0 || ndim > 8) throw InputError(path.string() + ": bad rank for " + e.name);
    for (std::uint32_t k = 0; k < ndim; ++k) e.shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    e.values.resize(shape_numel(e.shape));
    r.read(e.values.data(), e.values.size() * sizeof(double));
    c.entries.push_back(std::move(e));
  }
  return c;
}

void restore(ParamStore& store, const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<std::string> problems;
  for (const auto& e : store.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    const auto* src = ckpt.find(e.name);
    if (!src) {
      problems.push_back(e.name + " (missing)");
    } else if (src->shape != e.tensor.shape()) {
      problems.push_back(e.name + " (shape " + shape_str(src->shape) + " vs " + shape_str(e.tensor.shape()) + ")");
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  for (const auto& e : store.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    Tensor t = e.tensor;
    const auto& v = ckpt.find(e.name)->values;
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
}

namespace {

void two_sum(double a, double b, double& s, double& e) {
  s = a + b;
  const double bb = s - a;
  e = (a - (s - bb)) + (b - bb);
}

// Adds x to a nonoverlapping expansion (smallest component first); the sum stays exact.
void grow(std::vector<double>& expansion, double x) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < expansion.size(); ++i) {
    double e;
    two_sum(x, expansion[i], x, e);
    if (e != 0.0) expansion[n++] = e;
  }
  expansion.resize(n);
  if (x != 0.0) expansion.push_back(x);
}

// Sign of sum_i a_i - sum_j k*c_j, exactly.
int residual_sign(std::vector<double> expansion, double k, std::initializer_list<double> cs) {
  for (double c : cs) {
    const double p = k * c;
    grow(expansion, -p);
    grow(expansion, -std::fma(k, c, -p));
  }
  if (expansion.empty()) return 0;
  return expansion.back() > 0 ? 1 : -1;
}

}  // namespace

double rounded_mean(const std::vector<double>& xs) {
  std::vector<double> sum;
  for (double x : xs) grow(sum, x);
  const double k = static_cast<double>(xs.size());
  double approx = 0.0;
  for (double h : sum) approx += h;
  // Bracket: k*lo <= sum < k*hi with hi the next double up.
  double lo = approx / k;
  while (residual_sign(sum, k, {lo}) < 0) lo = std::nextafter(lo, -INFINITY);
  while (residual_sign(sum, k, {std::nextafter(lo, INFINITY)}) >= 0) lo = std::nextafter(lo, INFINITY);
  const double hi = std::nextafter(lo, INFINITY);
  if (residual_sign(sum, k, {lo}) == 0) return lo;
  auto twice = sum;
  for (double& h : twice) h *= 2.0;
  const int side = residual_sign(twice, k, {lo, hi});
  if (side < 0) return lo;
  if (side > 0) return hi;
  return (std::bit_cast<std::uint64_t>(lo) & 1u) ? hi : lo;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw InputError("no checkpoints to average");
  const Checkpoint& first = ckpts.front();
  std::vector<std::string> problems;
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    const auto& c = ckpts[k];
    if (c.entries.size() != first.entries.size())
      problems.push_back("checkpoint " + std::to_string(k) + " has " + std::to_string(c.entries.size()) +
                         " entries, expected " + std::to_string(first.entries.size()));
    for (const auto& e : first.entries) {
      const auto* o = c.find(e.name);
      if (!o)
        problems.push_back("checkpoint " + std::to_string(k) + " lacks " + e.name);
      else if (o->shape != e.shape)
        problems.push_back("checkpoint " + std::to_string(k) + " " + e.name + " has shape " + shape_str(o->shape) +
                           ", expected " + shape_str(e.shape));
    }
  }
  if (!problems.empty()) {
    std::string msg = "cannot average checkpoints:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw InputError(msg);
  }
  Checkpoint out = ckpts.back();
  if (ckpts.size() == 1) return out;
  std::vector<double> xs(ckpts.size());
  for (auto& e : out.entries) {
    std::vector<const std::vector<double>*> src;
    for (const auto& c : ckpts) src.push_back(&c.find(e.name)->values);
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      for (std::size_t k = 0; k < src.size(); ++k) xs[k] = (*src[k])[i];
      e.values[i] = rounded_mean(xs);
    }
  }
  return out;
}

std::string hex_digest(std::uint64_t d) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << d;
  return os.str();
}

}  // namespace dtx
