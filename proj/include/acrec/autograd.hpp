#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. Each op allocates a node holding its value; nodes whose inputs
// require gradients also record a backward closure. Graphs are freed when
// the last Var referencing them goes away.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace acrec::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Lazily allocated gradient buffer.
  T* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<T> value);
  static Var parameter(Shape shape, std::vector<T> value);
  static Var full(Shape shape, T fill);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  // Empty when no gradient has reached this node.
  std::span<const T> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const;
  void zero_grad() { node_->grad.clear(); }

  // Copy of the value with no gradient connection.
  Var detached() const { return constant(node_->shape, node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Accumulates d(root)/d(node) into every node reachable from `root` that
// requires gradients. `root` must hold a single element.
template <typename T>
void backward(const Var<T>& root);

// Boolean mask of shape [batch, rows, cols], broadcast over any axes between
// the batch axis and the trailing two axes of the tensor it is applied to.
struct PairMask {
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  bool operator()(std::size_t b, std::size_t i, std::size_t j) const {
    return bits[(b * rows + i) * cols + j] != 0;
  }
};

// ---- elementwise (numpy-style broadcasting for binary ops) ----
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
// scale * x + shift
template <typename T> Var<T> affine(const Var<T>& x, T scale, T shift);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> square(const Var<T>& x);
// Gradient is zero where the input was clamped.
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);

// ---- reductions ----
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
// x: [B, H..., n, m]; sqrt of the sum of squares over mask-valid entries of
// each trailing [n, m] block. Returns [B, H...].
template <typename T> Var<T> masked_l2(const Var<T>& x, const PairMask& mask);

// ---- linear algebra ----
// x: [..., k], w: [k, m] -> [..., m]
template <typename T> Var<T> matmul(const Var<T>& x, const Var<T>& w);
// x: [m, k], y: [n, k] -> [m, n]
template <typename T> Var<T> matmul_nt(const Var<T>& x, const Var<T>& y);
// a: [P..., n, m], b: [P..., m, r] -> [P..., n, r]
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b);
// a: [P..., n, k], b: [P..., m, k] -> scale * a b^T: [P..., n, m]
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b, T scale);
// x: [B, H, n, k], w: [H or 1, k, m] -> [B, H, n, m]; one weight per head.
template <typename T> Var<T> head_matmul(const Var<T>& x, const Var<T>& w);
// a: [P..., n, 1], c: [P..., m, 1] -> out[..., i, j] = a_i + c_j
template <typename T> Var<T> outer_add(const Var<T>& a, const Var<T>& c);

// ---- layout ----
// [B, n, d] -> [B, H, n, d / H]
template <typename T> Var<T> split_heads(const Var<T>& x, std::size_t heads);
// [B, H, n, dh] -> [B, n, H * dh]
template <typename T> Var<T> merge_heads(const Var<T>& x);
// [B, n, d] -> [B, d] at sequence position `pos`
template <typename T> Var<T> select_position(const Var<T>& x, std::size_t pos);
// [V, d] -> [V - begin, d]
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t begin);
// [B, H, n, m] -> [B, 1, n, m] averaged over axis 1
template <typename T> Var<T> mean_heads(const Var<T>& x);

// ---- model-specific ----
// Rows of `table` gathered by `ids`; ids equal to `skip_id` produce zero rows
// and never receive gradient. Output shape is out_prefix + [d].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int64_t> ids,
                 const Shape& out_prefix, std::int64_t skip_id);
// Softmax over the last axis of x: [B, H..., n, m] restricted to mask-valid
// entries. Masked entries are exactly 0. A row with no valid entry puts
// weight 1 on its own (diagonal) position.
template <typename T> Var<T> masked_softmax(const Var<T>& x, const PairMask& mask);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
// Entries outside the mask are replaced by `fill`; gradient flows only through
// mask-valid entries. Mask broadcast as in masked_softmax.
template <typename T> Var<T> masked_fill(const Var<T>& x, const PairMask& mask, T fill);
// x: [B, C] -> [B] with out[b] = x[b, cols[b]]
template <typename T> Var<T> pick(const Var<T>& x, std::span<const std::int64_t> cols);
// Inverted dropout; identity when p == 0.
template <typename T> Var<T> dropout(const Var<T>& x, T p, std::mt19937_64& rng);
// Mean over rows of -log softmax(logits)[target], each row capped at
// `max_loss` (zero gradient for capped rows).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int64_t> targets,
                     T max_loss);

}  // namespace acrec::ag
