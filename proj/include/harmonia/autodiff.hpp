#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

/// Tensor-level reverse-mode automatic differentiation in double precision.
///
/// A Tape records one forward pass. Every recorded node stores its value and,
/// when any input requires a gradient, a closure that maps the node's output
/// gradient onto its inputs. Tape::backward() walks the tape in reverse,
/// accumulates into the Parameter leaves and then clears the tape. Tensors
/// are flat row-major arrays with an explicit shape (NCHW for images).
namespace harmonia::ad {

using Array = Eigen::ArrayXd;
using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Parameter {
  std::string name;
  Shape shape;
  Array value;
  Array grad;
};

/// Named parameters in insertion order; addresses are stable.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Shape shape);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t count() const { return params_.size(); }
  std::int64_t total_size() const;

  void zero_grad();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a tape node. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;
  const Array& value() const;
  const Shape& shape() const;
  double item() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Receives the output gradient; pushes contributions via accumulate().
  using Backward = std::function<void(Tape&, const Array& out_grad)>;

  Var constant(Shape shape, Array value);
  Var parameter(Parameter& p);
  /// Records an op. `backward` is dropped when no input requires a gradient.
  Var record(Shape shape, Array value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Shape shape, Array value, const std::vector<Var>& inputs, Backward backward);
  Var detach(const Var& v);

  bool requires_grad(const Var& v) const;
  void accumulate(const Var& v, const Array& grad);

  /// Seeds d(loss)/d(loss) = 1, accumulates into parameters, clears the tape.
  /// Throws StateError when the loss does not belong to a recorded pass.
  void backward(const Var& loss);
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Shape shape;
    Array value;
    Array grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };
  Var push(Node node);
  const Node& node(const Var& v) const;

  std::vector<Node> nodes_;
};

/// Parameters plus the tape of the current pass.
struct ModelGraph {
  ParameterStore parameters;
  Tape tape;

  void backward(const Var& loss) { tape.backward(loss); }
};

// Elementwise and reduction ops. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

// Layer ops.
/// x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo].
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// x [N,C,H,W] -> [N,C,out_h,out_w], half-pixel-centred bilinear.
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var concat_channels(const std::vector<Var>& xs);
/// x [N,C,H,W] -> [N,C].
Var global_avg_pool(const Var& x);
/// x [N,F], w [O,F], b [O] -> [N,O].
Var linear(const Var& x, const Var& w, const Var& b);
/// x [N,F] -> columns [begin, begin + count).
Var slice_cols(const Var& x, int begin, int count);

// Harmonization ops.
/// deltas [N,C,K-1] -> knots [N,C,K]: normalised cumulative softplus
/// increments with first knot 0 and last knot 1.
Var curve_knots(const Var& deltas);
/// raw -> max(gain_max * sigmoid(raw), floor).
Var shading_gain(const Var& raw, double gain_max, double floor);
/// Differentiable t1. img [N,3,H,W], mask [N,1,H,W], knots x/y [N,3,K].
/// At a knot the right segment's derivative is used.
Var apply_curves(const Var& img, const Var& mask, const Var& x, const Var& y);
/// Differentiable t2 with a full-resolution gain [N,1,H,W].
Var apply_shading(const Var& img, const Var& mask, const Var& gain);
/// Mean absolute difference.
Var l1_loss(const Var& pred, const Var& target);

inline constexpr double kKnotFloor = 1e-3;

}  // namespace harmonia::ad
