#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

// Minimal define-by-run reverse-mode automatic differentiation over small
// dense float64 arrays with at most three axes.
namespace navgen::ndgrad {

inline constexpr const char* kCheckpointSchema = "navgen-ckpt/1";

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(const std::vector<std::size_t>& dims);

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t numel() const;
  // Matrix view: a rank-1 shape is a single row.
  std::size_t rows() const;
  std::size_t cols() const;
  std::vector<std::size_t> dims() const { return {dims_.begin(), dims_.begin() + static_cast<std::ptrdiff_t>(rank_)}; }
  std::string str() const;
  bool operator==(const Shape& o) const;

 private:
  std::array<std::size_t, 3> dims_{};
  std::size_t rank_ = 0;
};

// Trainable array that outlives any tape. Gradients accumulate across
// backward passes until zero_grad().
class Parameter {
 public:
  Parameter(std::string name, Shape shape);

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  std::vector<double>& value() { return value_; }
  const std::vector<double>& value() const { return value_; }
  std::vector<double>& grad() { return grad_; }
  const std::vector<double>& grad() const { return grad_; }
  void zero_grad();

 private:
  std::string name_;
  Shape shape_;
  std::vector<double> value_;
  std::vector<double> grad_;
};

class ParameterStore {
 public:
  Parameter& add(const std::string& name, Shape shape);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t count() const { return params_.size(); }
  void zero_grad();

  nlohmann::json to_json() const;
  // Names and shapes must match exactly.
  void load_json(const nlohmann::json& j);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Shape& shape() const;
  std::span<const double> values() const;
  // Empty until backward reaches this node.
  std::span<const double> grad() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // With record_gradients=false no backward closures are stored; used for
  // evaluation.
  explicit Tape(bool record_gradients = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor scalar(double v) { return constant(Shape{1}, {v}); }
  // Copy of a tensor from another tape, as a constant.
  Tensor import(const Tensor& other);
  // Leaf bound to a parameter; the same node is reused within one tape.
  Tensor param(Parameter& p);

  // Reverse pass from a scalar. Throws on a second call before clear().
  void backward(const Tensor& loss);
  void clear();

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // --- op-construction interface ---
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void()> backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  // Records a forward result. Throws NumericalError on NaN/Inf.
  Tensor push(const char* op, Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs);
  Tensor push(const char* op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs);
  void set_backward(const Tensor& t, std::function<void()> fn);
  // Gradient buffer of a node, zero-initialized on first access.
  std::vector<double>& grad(int id);

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool record_;
  bool backward_done_ = false;
};

// Elementwise; b may also be a scalar or a [1 x cols] row broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// out[i] = a[i, index[i]]; result is [rows x 1].
Tensor gather(const Tensor& a, std::span<const int> index);

Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
// Reduced axis is kept with size 1.
Tensor logsumexp(const Tensor& a, std::size_t axis);
// -log_softmax(logits)[target] over all elements of logits.
Tensor nll(const Tensor& logits, std::size_t target);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);

// Fused gated recurrent unit step, gate layout [reset | update | candidate]:
//   r = sig(x_r + h W_r + b_r), z = sig(x_z + h W_z + b_z),
//   n = tanh(x_n + r * (h W_n + b_n)), h' = (1 - z) * n + z * h.
// x_proj is [rows x 3H] or a [1 x 3H] row shared by every row of h.
Tensor gru_cell(const Tensor& x_proj, const Tensor& h, const Tensor& w_h, const Tensor& b_h);

// --- optimizers ---
void sgd_step(std::span<Parameter* const> params, double lr);

class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<Parameter* const> params);
  int steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::unordered_map<const Parameter*, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

// Checkpoint document: schema, free-form metadata and named arrays.
nlohmann::json checkpoint_json(const ParameterStore& store, const nlohmann::json& meta);
void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& meta);
// Loads arrays into store and returns the metadata.
nlohmann::json load_checkpoint(const std::string& path, ParameterStore& store);

}  // namespace navgen::ndgrad
