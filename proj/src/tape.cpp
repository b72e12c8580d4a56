#include "hsmamba/tape.hpp"

namespace hsmamba {

Parameter& ParamStore::create(const std::string& name, NdArray init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
  index_[name] = params_.size() - 1;
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::size_t ParamStore::total_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

std::size_t ParamStore::total_scalars_with_prefix(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->name.rfind(prefix, 0) == 0) n += p->value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_)
    for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] = 0.0;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.size() != size()) throw ConfigError("copy_values_from: store size mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    if (!params_[i]->value.same_shape(other[i].value))
      throw ShapeError("copy_values_from: shape mismatch for " + params_[i]->name);
    params_[i]->value = other[i].value;
  }
}

VarId Tape::constant(NdArray v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::input(NdArray v) {
  VarId id = constant(std::move(v));
  nodes_[id].needs_grad = true;
  return id;
}

VarId Tape::param(Parameter& p) {
  VarId id = constant(p.value);
  nodes_[id].bound = &p;
  nodes_[id].needs_grad = true;
  return id;
}

VarId Tape::apply(std::shared_ptr<const DiffOp> op, std::vector<VarId> inputs) {
  std::vector<const NdArray*> in;
  in.reserve(inputs.size());
  bool needs = false;
  for (VarId id : inputs) {
    in.push_back(&nodes_[id].value);
    needs = needs || nodes_[id].needs_grad;
  }
  NdArray out = op->forward(in);
  if (!out.all_finite())
    throw NumericError(std::string(op->name()) + " produced a non-finite value");
  Node n;
  n.value = std::move(out);
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

const NdArray& Tape::grad(VarId id) const {
  const Node& n = nodes_[id];
  if (!n.has_grad)
    throw Error("no gradient recorded for node " + std::to_string(id));
  return n.grad;
}

void Tape::accumulate(VarId id, const NdArray& g) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  for (std::size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
}

void Tape::backward(VarId root) {
  if (nodes_[root].value.numel() != 1)
    throw ShapeError("backward root must be scalar, got " +
                     shape_str(nodes_[root].value.shape()));
  nodes_[root].grad = NdArray::full(nodes_[root].value.shape(), 1.0);
  nodes_[root].has_grad = true;

  for (VarId id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.op) {
      std::vector<const NdArray*> in;
      in.reserve(n.inputs.size());
      for (VarId j : n.inputs) in.push_back(&nodes_[j].value);
      std::vector<NdArray> grads = n.op->backward(in, n.value, n.grad);
      if (grads.size() != n.inputs.size())
        throw Error(std::string(n.op->name()) + ": backward returned wrong arity");
      for (std::size_t j = 0; j < grads.size(); ++j) {
        Node& src = nodes_[n.inputs[j]];
        if (!src.needs_grad) continue;
        if (!grads[j].same_shape(src.value))
          throw ShapeError(std::string(n.op->name()) + ": gradient shape " +
                           shape_str(grads[j].shape()) + " != input shape " +
                           shape_str(src.value.shape()));
        accumulate(n.inputs[j], grads[j]);
      }
    } else if (n.bound) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) n.bound->grad[i] += n.grad[i];
    }
  }
}

}  // namespace hsmamba
