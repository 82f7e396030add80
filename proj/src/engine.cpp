#include "htwa/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <type_traits>

namespace htwa::engine {

namespace {

thread_local Tape* g_tape = nullptr;
std::atomic<std::uint64_t> g_next_id{1};

using NodePtr = std::shared_ptr<Node>;

// Gradient buffer of an input, or an empty span when it takes no gradient.
std::span<double> input_grad(const NodePtr& node) {
  if (!node->requires_grad) return {};
  return node->grad_buffer();
}

template <class Rule>
DiffArray finish(Shape shape, std::vector<double> data, std::initializer_list<const DiffArray*> inputs,
                 Rule rule) {
  DiffArray out(std::move(shape), std::move(data));
  Tape* tape = g_tape;
  if (tape == nullptr) return out;
  bool needed = false;
  for (const DiffArray* in : inputs) needed = needed || in->requires_grad();
  if (!needed) return out;

  out.set_requires_grad(true);
  Tape::Entry entry;
  for (const DiffArray* in : inputs) entry.inputs.push_back(in->id());
  entry.output = out.id();
  entry.backward = [out_node = out.node(), rule = std::move(rule)]() {
    if (out_node->grad.empty()) return;
    if constexpr (std::is_invocable_v<Rule&, std::span<const double>, const Node&>) {
      rule(std::span<const double>(out_node->grad), *out_node);
    } else {
      rule(std::span<const double>(out_node->grad));
    }
  };
  tape->push(std::move(entry));
  return out;
}

DiffArray finish_many(Shape shape, std::vector<double> data, const std::vector<DiffArray>& inputs,
                      std::function<void(std::span<const double>)> rule) {
  DiffArray out(std::move(shape), std::move(data));
  Tape* tape = g_tape;
  if (tape == nullptr) return out;
  bool needed = std::any_of(inputs.begin(), inputs.end(),
                            [](const DiffArray& in) { return in.requires_grad(); });
  if (!needed) return out;
  out.set_requires_grad(true);
  Tape::Entry entry;
  for (const DiffArray& in : inputs) entry.inputs.push_back(in.id());
  entry.output = out.id();
  entry.backward = [out_node = out.node(), rule = std::move(rule)]() {
    if (out_node->grad.empty()) return;
    rule(std::span<const double>(out_node->grad));
  };
  tape->push(std::move(entry));
  return out;
}

std::size_t product(const Shape& shape, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= shape[i];
  return p;
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

void check_axis(const std::string& op, const DiffArray& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw std::invalid_argument(op + ": axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) { return product(shape, 0, shape.size()); }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

DiffArray::DiffArray(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (engine::numel(shape) != data.size()) {
    throw std::invalid_argument("DiffArray: shape " + shape_str(shape) + " holds " +
                                std::to_string(engine::numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

DiffArray DiffArray::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(engine::numel(shape), value);
  return DiffArray(std::move(shape), std::move(data), requires_grad);
}

DiffArray DiffArray::scalar(double value, bool requires_grad) {
  return DiffArray(Shape{}, {value}, requires_grad);
}

double DiffArray::item() const {
  if (numel() != 1) throw std::invalid_argument("item: array " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

DiffArray DiffArray::detach() const { return DiffArray(node_->shape, node_->data, false); }

void Tape::backward(const DiffArray& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any array requiring grad");
  }
  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
    ++replayed_;
  }
}

void Tape::clear() {
  entries_.clear();
  replayed_ = 0;
}

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = previous_; }

void backward(const DiffArray& loss) {
  if (g_tape == nullptr) throw std::logic_error("backward: no active tape");
  g_tape->backward(loss);
}

MacCounter& MacCounter::instance() {
  thread_local MacCounter counter;
  return counter;
}

void MacCounter::add(std::uint64_t macs) {
  if (!enabled_) return;
  total_ += macs;
  by_category_[stack_.empty() ? std::string("other") : stack_.back()] += macs;
}

void MacCounter::reset() {
  total_ = 0;
  by_category_.clear();
}

MacCategory::MacCategory(std::string name) { MacCounter::instance().stack_.push_back(std::move(name)); }
MacCategory::~MacCategory() { MacCounter::instance().stack_.pop_back(); }

// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = c + i * n;
    for (std::size_t r = 0; r < k; ++r) {
      const double air = a[i * k + r];
      const double* brow = b + r * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += air * brow[j];
    }
  }
}

// C[m,n] += A[m,k] B[n,k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t r = 0; r < k; ++r) bt[r * n + j] = b[j * k + r];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[m,n] += A[k,m]^T B[k,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t r = 0; r < k; ++r) {
    const double* brow = b + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ari = a[r * m + i];
      double* row = c + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += ari * brow[j];
    }
  }
}

}  // namespace

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), c.data());
  MacCounter::instance().add(static_cast<std::uint64_t>(m) * k * n);
  return finish({m, n}, std::move(c), {&a, &b},
                [an = a.node(), bn = b.node(), m, k, n](std::span<const double> g) {
                  if (auto ga = input_grad(an); !ga.empty()) gemm_nt(m, n, k, g.data(), bn->data.data(), ga.data());
                  if (auto gb = input_grad(bn); !gb.empty()) gemm_tn(k, m, n, an->data.data(), g.data(), gb.data());
                });
}

DiffArray bmm(const DiffArray& a, const DiffArray& b, bool transpose_b) {
  if (a.rank() < 2 || a.rank() != b.rank()) shape_error("bmm", a.shape(), b.shape());
  const std::size_t rank = a.rank();
  for (std::size_t i = 0; i + 2 < rank; ++i)
    if (a.dim(i) != b.dim(i)) shape_error("bmm", a.shape(), b.shape());
  const std::size_t m = a.dim(rank - 2), k = a.dim(rank - 1);
  const std::size_t n = transpose_b ? b.dim(rank - 2) : b.dim(rank - 1);
  const std::size_t kb = transpose_b ? b.dim(rank - 1) : b.dim(rank - 2);
  if (kb != k) shape_error("bmm", a.shape(), b.shape());
  const std::size_t batch = product(a.shape(), 0, rank - 2);

  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> c(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    if (transpose_b) {
      gemm_nt(m, k, n, pa + t * m * k, pb + t * k * n, c.data() + t * m * n);
    } else {
      gemm_nn(m, k, n, pa + t * m * k, pb + t * k * n, c.data() + t * m * n);
    }
  }
  MacCounter::instance().add(static_cast<std::uint64_t>(batch) * m * k * n);
  return finish(std::move(out_shape), std::move(c), {&a, &b},
                [an = a.node(), bn = b.node(), batch, m, k, n, transpose_b](std::span<const double> g) {
                  auto ga = input_grad(an);
                  auto gb = input_grad(bn);
                  for (std::size_t t = 0; t < batch; ++t) {
                    const double* ta = an->data.data() + t * m * k;
                    const double* tb = bn->data.data() + t * k * n;
                    const double* tg = g.data() + t * m * n;
                    if (!ga.empty()) {
                      double* tga = ga.data() + t * m * k;
                      if (transpose_b) {
                        gemm_nn(m, n, k, tg, tb, tga);  // b is [n, k]
                      } else {
                        gemm_nt(m, n, k, tg, tb, tga);  // b is [k, n]
                      }
                    }
                    if (!gb.empty()) {
                      double* tgb = gb.data() + t * k * n;
                      if (transpose_b) {
                        gemm_tn(n, m, k, tg, ta, tgb);
                      } else {
                        gemm_tn(k, m, n, ta, tg, tgb);
                      }
                    }
                  }
                });
}

namespace {

enum class Binary { kAdd, kSub, kMul };

DiffArray binary(const char* name, Binary kind, const DiffArray& a, const DiffArray& b) {
  if (!is_suffix(a.shape(), b.shape())) shape_error(name, a.shape(), b.shape());
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<double> out(n);
  const auto pa = a.data();
  const auto pb = b.data();
  for (std::size_t base = 0; base < n; base += nb) {
    for (std::size_t j = 0; j < nb; ++j) {
      const double x = pa[base + j], y = pb[j];
      out[base + j] = kind == Binary::kAdd ? x + y : kind == Binary::kSub ? x - y : x * y;
    }
  }
  return finish(a.shape(), std::move(out), {&a, &b},
                [an = a.node(), bn = b.node(), kind, n, nb](std::span<const double> g) {
                  auto ga = input_grad(an);
                  auto gb = input_grad(bn);
                  for (std::size_t base = 0; base < n; base += nb) {
                    for (std::size_t j = 0; j < nb; ++j) {
                      const double gv = g[base + j];
                      switch (kind) {
                        case Binary::kAdd:
                          if (!ga.empty()) ga[base + j] += gv;
                          if (!gb.empty()) gb[j] += gv;
                          break;
                        case Binary::kSub:
                          if (!ga.empty()) ga[base + j] += gv;
                          if (!gb.empty()) gb[j] -= gv;
                          break;
                        case Binary::kMul:
                          if (!ga.empty()) ga[base + j] += gv * bn->data[j];
                          if (!gb.empty()) gb[j] += gv * an->data[base + j];
                          break;
                      }
                    }
                  }
                });
}

}  // namespace

DiffArray add(const DiffArray& a, const DiffArray& b) { return binary("add", Binary::kAdd, a, b); }
DiffArray sub(const DiffArray& a, const DiffArray& b) { return binary("sub", Binary::kSub, a, b); }
DiffArray mul(const DiffArray& a, const DiffArray& b) { return binary("mul", Binary::kMul, a, b); }

DiffArray scale(const DiffArray& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return finish(a.shape(), std::move(out), {&a}, [an = a.node(), factor](std::span<const double> g) {
    auto ga = input_grad(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

DiffArray softmax(const DiffArray& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const Shape& s = x.shape();
  const std::size_t outer = product(s, 0, axis), len = s[axis], inner = product(s, axis + 1, s.size());
  std::vector<double> y(x.numel());
  const auto px = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = px[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(px[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  return finish(s, std::move(y), {&x},
                [xn = x.node(), outer, len, inner](std::span<const double> g, const Node& out) {
                  auto gx = input_grad(xn);
                  const auto& yv = out.data;
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = o * len * inner + in;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yv[base + j * inner];
                      for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += yv[idx] * (g[idx] - dot);
                      }
                    }
                });
}

DiffArray layernorm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layernorm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) shape_error("layernorm", x.shape(), gain.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), inv_std(rows), y(x.numel());
  const auto px = x.data();
  const auto pg = gain.data();
  const auto pbias = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      y[r * d + j] = h * pg[j] + pbias[j];
    }
  }
  return finish(x.shape(), std::move(y), {&x, &gain, &bias},
                [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat),
                 inv_std = std::move(inv_std), rows, d](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  auto gg = input_grad(gn);
                  auto gbias = input_grad(bn);
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * d;
                    const double* hr = xhat.data() + r * d;
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = gr[j] * gn->data[j];
                      mean_dh += dh;
                      mean_dh_h += dh * hr[j];
                      if (!gg.empty()) gg[j] += gr[j] * hr[j];
                      if (!gbias.empty()) gbias[j] += gr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    if (!gx.empty()) {
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gn->data[j];
                        gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                      }
                    }
                  }
                });
}

DiffArray gelu(const DiffArray& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  std::vector<double> y(x.numel());
  const auto px = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = px[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
  }
  return finish(x.shape(), std::move(y), {&x}, [xn = x.node()](std::span<const double> g) {
    auto gx = input_grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->data[i];
      const double u = c * (v + a * v * v * v);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * a * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

DiffArray l2_normalize(const DiffArray& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<double> y(x.numel()), norms(rows);
  const auto px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += px[r * d + j] * px[r * d + j];
    const double nrm = std::max(std::sqrt(s), 1e-12);
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = px[r * d + j] / nrm;
  }
  return finish(x.shape(), std::move(y), {&x},
                [xn = x.node(), norms = std::move(norms), rows, d](std::span<const double> g, const Node& out) {
                  auto gx = input_grad(xn);
                  const auto& yv = out.data;
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += yv[r * d + j] * g[r * d + j];
                    for (std::size_t j = 0; j < d; ++j)
                      gx[r * d + j] += (g[r * d + j] - yv[r * d + j] * dot) / norms[r];
                  }
                });
}

DiffArray sum(const DiffArray& x, std::size_t axis) {
  check_axis("sum", x, axis);
  const Shape& s = x.shape();
  const std::size_t outer = product(s, 0, axis), len = s[axis], inner = product(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> y(outer * inner, 0.0);
  const auto px = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < inner; ++in) y[o * inner + in] += px[(o * len + j) * inner + in];
  return finish(std::move(out_shape), std::move(y), {&x},
                [xn = x.node(), outer, len, inner](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < len; ++j)
                      for (std::size_t in = 0; in < inner; ++in)
                        gx[(o * len + j) * inner + in] += g[o * inner + in];
                });
}

DiffArray mean(const DiffArray& x, std::size_t axis) {
  check_axis("mean", x, axis);
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

DiffArray sum_all(const DiffArray& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return finish(Shape{}, {s}, {&x}, [xn = x.node()](std::span<const double> g) {
    auto gx = input_grad(xn);
    for (double& v : gx) v += g[0];
  });
}

DiffArray mean_all(const DiffArray& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

DiffArray reshape(const DiffArray& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<double> y(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(y), {&x}, [xn = x.node()](std::span<const double> g) {
    auto gx = input_grad(xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) shape_error("permute", x.shape(), Shape(axes.begin(), axes.end()));
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) shape_error("permute", x.shape(), Shape(axes.begin(), axes.end()));
    seen[a] = true;
  }
  const Shape& s = x.shape();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);  // input stride of each output axis
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  // Source offset of each output element, in output order.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    src[flat] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        offset += step[ax];
        break;
      }
      offset -= step[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  std::vector<double> y(n);
  const auto px = x.data();
  for (std::size_t i = 0; i < n; ++i) y[i] = px[src[i]];
  return finish(std::move(out_shape), std::move(y), {&x},
                [xn = x.node(), src = std::move(src)](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
                });
}

DiffArray transpose(const DiffArray& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: expected 2-D, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  check_axis("concat", parts.front(), axis);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) shape_error("concat", s0, p.shape());
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.dim(i) != s0[i]) shape_error("concat", s0, p.shape());
    total += p.dim(axis);
  }
  const std::size_t outer = product(s0, 0, axis), inner = product(s0, axis + 1, s0.size());
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> y(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.dim(axis) * inner;
    const auto pp = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pp.data() + o * chunk, chunk, y.data() + o * total * inner + off * inner);
    off += p.dim(axis);
  }
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(p.dim(axis));
  }
  return finish_many(std::move(out_shape), std::move(y), parts,
                     [nodes, lens, offsets, outer, total, inner](std::span<const double> g) {
                       for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                         auto gp = input_grad(nodes[pi]);
                         if (gp.empty()) continue;
                         const std::size_t chunk = lens[pi] * inner;
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = g.data() + o * total * inner + offsets[pi] * inner;
                           for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += src[j];
                         }
                       }
                     });
}

DiffArray slice(const DiffArray& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis("slice", x, axis);
  const Shape& s = x.shape();
  if (start + length > s[axis] || length == 0) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + length) + ") invalid for axis " +
                                std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = product(s, 0, axis), len = s[axis], inner = product(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<double> y(outer * length * inner);
  const auto px = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(px.data() + (o * len + start) * inner, length * inner, y.data() + o * length * inner);
  return finish(std::move(out_shape), std::move(y), {&x},
                [xn = x.node(), outer, len, inner, start, length](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < length * inner; ++j)
                      gx[(o * len + start) * inner + j] += g[o * length * inner + j];
                });
}

std::vector<DiffArray> split(const DiffArray& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  check_axis("split", x, axis);
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.dim(axis)) {
    throw std::invalid_argument("split: sizes sum to " + std::to_string(total) + " but axis " +
                                std::to_string(axis) + " of " + shape_str(x.shape()) + " has " +
                                std::to_string(x.dim(axis)));
  }
  std::vector<DiffArray> out;
  std::size_t start = 0;
  for (std::size_t len : sizes) {
    out.push_back(slice(x, axis, start, len));
    start += len;
  }
  return out;
}

DiffArray index_select(const DiffArray& table, const std::vector<std::size_t>& indices) {
  if (table.rank() < 1) throw std::invalid_argument("index_select: table must have rank >= 1");
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.numel() / std::max<std::size_t>(rows, 1);
  Shape out_shape = table.shape();
  out_shape[0] = indices.size();
  std::vector<double> y(indices.size() * width);
  const auto pt = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw std::out_of_range("index_select: index " + std::to_string(indices[i]) + " >= " +
                              std::to_string(rows));
    }
    std::copy_n(pt.data() + indices[i] * width, width, y.data() + i * width);
  }
  return finish(std::move(out_shape), std::move(y), {&table},
                [tn = table.node(), indices, width](std::span<const double> g) {
                  auto gt = input_grad(tn);
                  for (std::size_t i = 0; i < indices.size(); ++i)
                    for (std::size_t j = 0; j < width; ++j) gt[indices[i] * width + j] += g[i * width + j];
                });
}

DiffArray masked_fill(const DiffArray& x, const std::vector<std::uint8_t>& mask, double value) {
  const std::size_t n = x.numel(), nm = mask.size();
  bool suffix = false;
  for (std::size_t k = 0; k <= x.rank() && !suffix; ++k) suffix = product(x.shape(), k, x.rank()) == nm;
  if (!suffix || nm == 0) {
    throw std::invalid_argument("masked_fill: mask of " + std::to_string(nm) +
                                " entries does not match a suffix of " + shape_str(x.shape()));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i % nm]) y[i] = value;
  return finish(x.shape(), std::move(y), {&x}, [xn = x.node(), mask](std::span<const double> g) {
    auto gx = input_grad(xn);
    const std::size_t nm = mask.size();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i % nm]) gx[i] += g[i];
  });
}

DiffArray max_pool2d(const DiffArray& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw) {
  if (x.rank() < 3) throw std::invalid_argument("max_pool2d: expected [..., H, W, C], got " + shape_str(x.shape()));
  const std::size_t r = x.rank();
  const std::size_t h = x.dim(r - 3), w = x.dim(r - 2), c = x.dim(r - 1);
  if (kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w) {
    throw std::invalid_argument("max_pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " invalid for " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - kh) / sh + 1, wo = (w - kw) / sw + 1;
  const std::size_t lead = x.numel() / (h * w * c);
  Shape out_shape = x.shape();
  out_shape[r - 3] = ho;
  out_shape[r - 2] = wo;
  std::vector<double> y(lead * ho * wo * c);
  std::vector<std::size_t> argmax(y.size());
  const auto px = x.data();
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((l * h + oy * sh) * w + ox * sw) * c + ch;
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const std::size_t idx = ((l * h + oy * sh + dy) * w + ox * sw + dx) * c + ch;
              if (px[idx] > px[best]) best = idx;
            }
          const std::size_t o = ((l * ho + oy) * wo + ox) * c + ch;
          y[o] = px[best];
          argmax[o] = best;
        }
  return finish(std::move(out_shape), std::move(y), {&x},
                [xn = x.node(), argmax = std::move(argmax)](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                });
}

DiffArray avg_pool2d(const DiffArray& x, std::size_t kh, std::size_t kw) {
  if (x.rank() < 3) throw std::invalid_argument("avg_pool2d: expected [..., H, W, C], got " + shape_str(x.shape()));
  const std::size_t r = x.rank();
  const std::size_t h = x.dim(r - 3), w = x.dim(r - 2), c = x.dim(r - 1);
  if (kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0) {
    throw std::invalid_argument("avg_pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " does not tile " + shape_str(x.shape()));
  }
  const std::size_t ho = h / kh, wo = w / kw;
  const std::size_t lead = x.numel() / (h * w * c);
  const double inv = 1.0 / static_cast<double>(kh * kw);
  Shape out_shape = x.shape();
  out_shape[r - 3] = ho;
  out_shape[r - 2] = wo;
  std::vector<double> y(lead * ho * wo * c, 0.0);
  const auto px = x.data();
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < w; ++ix)
        for (std::size_t ch = 0; ch < c; ++ch)
          y[((l * ho + iy / kh) * wo + ix / kw) * c + ch] += inv * px[((l * h + iy) * w + ix) * c + ch];
  return finish(std::move(out_shape), std::move(y), {&x},
                [xn = x.node(), lead, h, w, c, kh, kw, ho, wo, inv](std::span<const double> g) {
                  auto gx = input_grad(xn);
                  for (std::size_t l = 0; l < lead; ++l)
                    for (std::size_t iy = 0; iy < h; ++iy)
                      for (std::size_t ix = 0; ix < w; ++ix)
                        for (std::size_t ch = 0; ch < c; ++ch)
                          gx[((l * h + iy) * w + ix) * c + ch] +=
                              inv * g[((l * ho + iy / kh) * wo + ix / kw) * c + ch];
                });
}

DiffArray cross_entropy(const DiffArray& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || targets.empty()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                                std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<double> probs(n * c);
  const auto pl = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " >= " + std::to_string(c));
    const double* row = pl.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  return finish(Shape{}, {total / static_cast<double>(n)}, {&logits},
                [ln = logits.node(), probs = std::move(probs), targets, n, c](std::span<const double> g) {
                  auto gl = input_grad(ln);
                  const double f = g[0] / static_cast<double>(n);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                      gl[i * c + j] += f * (probs[i * c + j] - (j == targets[i] ? 1.0 : 0.0));
                });
}

}  // namespace htwa::engine
