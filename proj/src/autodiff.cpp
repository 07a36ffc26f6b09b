#include "cstr/autodiff.hpp"

#include <stdexcept>

namespace cstr {

const Tensor& Var::value() const {
  if (!graph_) throw std::logic_error("use of an unbound Var");
  return graph_->nodes_[static_cast<std::size_t>(id_)].value;
}

bool Var::requires_grad() const {
  return graph_->nodes_[static_cast<std::size_t>(id_)].requires_grad;
}

Graph::Graph(const ParameterStore& params, GraphOptions options)
    : params_(&params), options_(options) {}

Var Graph::constant(const Tensor& value) {
  nodes_.push_back(Node{value.to(options_.precision), {}, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::param(const std::string& name) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var(this, it->second);
  const Tensor& value = params_->get(name);
  if (value.precision() != options_.precision) {
    throw std::invalid_argument("parameter '" + name + "' is " + to_string(value.precision()) +
                                " but the graph runs in " + to_string(options_.precision));
  }
  const bool rg = options_.grad_enabled && params_->trainable(name);
  nodes_.push_back(Node{value, {}, nullptr, rg});
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_ids_.emplace(name, id);
  return Var(this, id);
}

bool Graph::any_requires_grad(std::initializer_list<Var> inputs) const {
  return any_requires_grad(std::vector<Var>(inputs));
}

bool Graph::any_requires_grad(const std::vector<Var>& inputs) const {
  if (!options_.grad_enabled) return false;
  for (const auto& v : inputs) {
    if (v.valid() && nodes_[static_cast<std::size_t>(v.id())].requires_grad) return true;
  }
  return false;
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  if (value.precision() != options_.precision) {
    throw std::logic_error("op produced a tensor of the wrong precision");
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = any_requires_grad(inputs);
  if (node.requires_grad) {
    for (const auto& v : inputs) {
      if (!v.valid()) continue;
      if (&v.graph() != this) throw std::logic_error("op mixes Vars from different graphs");
      node.inputs.push_back(v.id());
    }
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::backward(Var root) {
  if (root.value().numel() != 1) {
    throw ShapeError("backward root must be a scalar, got " + to_string(root.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  backward_visits_ = 0;
  grads_[static_cast<std::size_t>(root.id())] =
      Tensor::full(root.shape(), 1.0, options_.precision);
  for (int id = root.id(); id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (!g.defined() || !node.backward) continue;
    ++backward_visits_;
    node.backward(*this, g);
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("gradient shape " + to_string(src.shape()) + " does not match " +
                     to_string(dst.shape()));
  }
  dispatch(dst.precision(), [&](auto tag) {
    using T = decltype(tag);
    auto d = dst.mutable_data<T>();
    auto s = src.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

void Graph::accumulate(const Var& v, const Tensor& grad) {
  auto& node = nodes_[static_cast<std::size_t>(v.id())];
  if (!node.requires_grad) return;
  if (grad.shape() != node.value.shape()) {
    throw ShapeError("gradient " + to_string(grad.shape()) + " for value " +
                     to_string(node.value.shape()));
  }
  auto& slot = grads_[static_cast<std::size_t>(v.id())];
  if (!slot.defined()) {
    slot = grad;
  } else {
    add_into(slot, grad);
  }
}

bool Graph::has_grad(const Var& v) const {
  return static_cast<std::size_t>(v.id()) < grads_.size() &&
         grads_[static_cast<std::size_t>(v.id())].defined();
}

Tensor Graph::grad(const Var& v) const {
  if (has_grad(v)) return grads_[static_cast<std::size_t>(v.id())];
  return Tensor(v.shape(), options_.precision);
}

std::map<std::string, Tensor> Graph::parameter_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : param_ids_) {
    if (!params_->trainable(name)) continue;
    out.emplace(name, grad(Var(const_cast<Graph*>(this), id)));
  }
  return out;
}

void Graph::stage_buffer(const std::string& name, Tensor value) {
  staged_.insert_or_assign(name, std::move(value));
}

void Graph::commit_buffers(ParameterStore& store) const {
  for (const auto& [name, value] : staged_) store.set(name, value);
}

}  // namespace cstr
