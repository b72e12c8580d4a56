#pragma once

#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hsmamba/tensor.hpp"

namespace hsmamba {

// A differentiable primitive: a pure forward map plus a backward map from the
// upstream gradient to one gradient per input. Implementations hold only
// configuration (never mutable state), so forward is referentially transparent
// and backward may recompute whatever it needs from the inputs.
class DiffOp {
 public:
  virtual ~DiffOp() = default;
  virtual const char* name() const = 0;
  virtual NdArray forward(const std::vector<const NdArray*>& in) const = 0;
  virtual std::vector<NdArray> backward(const std::vector<const NdArray*>& in,
                                        const NdArray& out,
                                        const NdArray& grad_out) const = 0;
};

// Named trainable array with its gradient buffer and Adam slots.
struct Parameter {
  std::string name;
  NdArray value;
  NdArray grad;
  NdArray adam_m;
  NdArray adam_v;

  Parameter(std::string n, NdArray v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

// Owns every Parameter of a model. Creation order is the serialization order.
class ParamStore {
 public:
  Parameter& create(const std::string& name, NdArray init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t total_scalars() const;
  std::size_t total_scalars_with_prefix(const std::string& prefix) const;
  void zero_grads();
  void copy_values_from(const ParamStore& other);  // by position, shapes must agree

  // global Adam step counter, shared by every parameter in the store
  long adam_t = 0;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using VarId = int;

// Reverse-mode tape: forward calls append nodes, backward walks them in
// reverse. Gradients of bound parameters accumulate into Parameter::grad.
class Tape {
 public:
  // leaf that never needs a gradient (inputs, fixed tables)
  VarId constant(NdArray v);
  // leaf whose gradient is retained on the tape (for tests and probes)
  VarId input(NdArray v);
  // leaf wired to a parameter; backward adds into p.grad
  VarId param(Parameter& p);

  VarId apply(std::shared_ptr<const DiffOp> op, std::vector<VarId> inputs);

  const NdArray& value(VarId id) const { return nodes_[id].value; }
  const NdArray& grad(VarId id) const;

  // root must be scalar (numel == 1); seeds d(root)/d(root) = 1
  void backward(VarId root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    NdArray value;
    NdArray grad;
    std::shared_ptr<const DiffOp> op;  // null for leaves
    std::vector<VarId> inputs;
    Parameter* bound = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  void accumulate(VarId id, const NdArray& g);

  // deque keeps value() references stable while the tape grows
  std::deque<Node> nodes_;
};

}  // namespace hsmamba
