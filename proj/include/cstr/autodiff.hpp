#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "cstr/params.hpp"
#include "cstr/tensor.hpp"

namespace cstr {

class Graph;

// Handle to a value recorded in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(int axis) const { return value().dim(axis); }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

struct GraphOptions {
  Precision precision = Precision::f32;
  // Batchnorm uses batch statistics and stages running-stat updates when true.
  bool training = true;
  // When false no backward closures or saved activations are kept.
  bool grad_enabled = true;
};

// Tape of executed primitives. Ops are appended in execution order, so the
// tape is topologically sorted by construction and backward walks it once in
// reverse.
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor& grad_out)>;

  explicit Graph(const ParameterStore& params, GraphOptions options = {});
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Precision precision() const { return options_.precision; }
  bool training() const { return options_.training; }
  bool grad_enabled() const { return options_.grad_enabled; }
  const ParameterStore& params() const { return *params_; }

  Var constant(const Tensor& value);
  // Same name always yields the same node.
  Var param(const std::string& name);
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);
  bool any_requires_grad(std::initializer_list<Var> inputs) const;
  bool any_requires_grad(const std::vector<Var>& inputs) const;

  // Seeds d(root)/d(root) = 1; root must hold exactly one element.
  void backward(Var root);

  void accumulate(const Var& v, const Tensor& grad);
  bool has_grad(const Var& v) const;
  // Zeros when the node was not reached from the backward root.
  Tensor grad(const Var& v) const;
  // Gradients for every trainable parameter referenced in this graph.
  std::map<std::string, Tensor> parameter_grads() const;

  void stage_buffer(const std::string& name, Tensor value);
  const std::map<std::string, Tensor>& staged_buffers() const { return staged_; }
  // Writes staged running statistics back into `store`.
  void commit_buffers(ParameterStore& store) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    Backward backward;
    bool requires_grad = false;
  };

  const ParameterStore* params_;
  GraphOptions options_;
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, int> param_ids_;
  std::map<std::string, Tensor> staged_;
  std::size_t backward_visits_ = 0;
};

void add_into(Tensor& dst, const Tensor& src);

}  // namespace cstr
