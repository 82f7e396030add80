#pragma once

// Dense float64 arrays with a record-on-execute reverse-mode tape.
//
// Every op checks whether a tape is active on the calling thread and whether
// any input requires a gradient; only then is a backward rule recorded. With
// no active tape the ops are plain forward computations.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace htwa::engine {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Value written by masked_fill; exp() of it underflows to exactly 0.
inline constexpr double kMaskValue = -1e9;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::uint64_t id = 0;

  std::span<double> grad_buffer();
};

class DiffArray {
 public:
  DiffArray() = default;
  DiffArray(Shape shape, std::vector<double> data, bool requires_grad = false);

  static DiffArray zeros(Shape shape, bool requires_grad = false);
  static DiffArray full(Shape shape, double value, bool requires_grad = false);
  static DiffArray scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::uint64_t id() const { return node_->id; }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Fresh node holding a copy of the values; never records, never receives
  // gradient.
  DiffArray detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  struct Entry {
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
  };

  void push(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t replay_count() const { return replayed_; }

  // Seeds d(loss)/d(loss) = 1 and replays every entry once, newest first.
  void backward(const DiffArray& loss);
  void clear();

 private:
  std::vector<Entry> entries_;
  std::size_t replayed_ = 0;
};

Tape* active_tape();

// Makes `tape` the recording target of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (e.g. for evaluation inside a training step).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Runs backward on the active tape. Throws if no tape is active.
void backward(const DiffArray& loss);

// Multiply-add instrumentation. matmul and bmm report m*k*n per product in
// forward only; the count is attributed to the innermost MacCategory.
class MacCounter {
 public:
  static MacCounter& instance();
  void add(std::uint64_t macs);
  void reset();
  std::uint64_t total() const { return total_; }
  const std::map<std::string, std::uint64_t>& by_category() const { return by_category_; }
  void set_enabled(bool enabled) { enabled_ = enabled; }
  bool enabled() const { return enabled_; }

 private:
  friend class MacCategory;
  bool enabled_ = false;
  std::uint64_t total_ = 0;
  std::map<std::string, std::uint64_t> by_category_;
  std::vector<std::string> stack_;
};

class MacCategory {
 public:
  explicit MacCategory(std::string name);
  ~MacCategory();
  MacCategory(const MacCategory&) = delete;
  MacCategory& operator=(const MacCategory&) = delete;
};

// ---------------------------------------------------------------------------
// Ops. Broadcasting is limited to "suffix" form: the second operand's shape
// equals the trailing dimensions of the first and is repeated over the rest.

DiffArray matmul(const DiffArray& a, const DiffArray& b);
// Batched product over equal leading dims: [..., m, k] x [..., k, n], or
// [..., m, k] x [..., n, k]^T when transpose_b is set.
DiffArray bmm(const DiffArray& a, const DiffArray& b, bool transpose_b = false);

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& a, double factor);

DiffArray softmax(const DiffArray& x, std::size_t axis);
DiffArray layernorm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                    double eps = 1e-12);
DiffArray gelu(const DiffArray& x);
DiffArray l2_normalize(const DiffArray& x);

DiffArray sum(const DiffArray& x, std::size_t axis);
DiffArray mean(const DiffArray& x, std::size_t axis);
DiffArray sum_all(const DiffArray& x);
DiffArray mean_all(const DiffArray& x);

DiffArray reshape(const DiffArray& x, Shape shape);
DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& axes);
DiffArray transpose(const DiffArray& x);  // 2-D only
DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis);
DiffArray slice(const DiffArray& x, std::size_t axis, std::size_t start, std::size_t length);
std::vector<DiffArray> split(const DiffArray& x, std::size_t axis,
                             const std::vector<std::size_t>& sizes);

// Rows of `table` along axis 0; gradient is scatter-added back.
DiffArray index_select(const DiffArray& table, const std::vector<std::size_t>& indices);
inline DiffArray embedding(const DiffArray& table, const std::vector<std::size_t>& ids) {
  return index_select(table, ids);
}

// mask is nonzero where x is replaced by `value`; its length must equal the
// element count of a suffix of x's shape.
DiffArray masked_fill(const DiffArray& x, const std::vector<std::uint8_t>& mask,
                      double value = kMaskValue);

// x is [..., H, W, C]; pooling windows slide over H and W.
DiffArray max_pool2d(const DiffArray& x, std::size_t kh, std::size_t kw, std::size_t sh = 1,
                     std::size_t sw = 1);
DiffArray avg_pool2d(const DiffArray& x, std::size_t kh, std::size_t kw);

// Mean over rows of -log softmax(logits)[target]. logits is [n, classes].
DiffArray cross_entropy(const DiffArray& logits, const std::vector<std::size_t>& targets);

}  // namespace htwa::engine
