#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Dense f64 tensors plus a reverse-mode tape. Every differentiable primitive
// appends one record to the thread's active Graph; Graph::backward replays the
// records in reverse and accumulates gradients additively. Tensors are
// immutable after creation except for gradient accumulation and explicit
// parameter updates between graphs.

namespace geohand {

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
[[noreturn]] void fail(const std::string& msg);

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  uint64_t id = 0;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int> shape, std::vector<double> data);

  bool defined() const { return impl != nullptr; }
  const std::vector<int>& shape() const;
  int dim() const { return static_cast<int>(shape().size()); }
  int extent(int axis) const;
  int64_t numel() const;

  double* data();
  const double* data() const;
  double value() const;  // scalar read, checks numel == 1
  double at(const std::vector<int>& idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool b);

  bool has_grad() const;
  std::vector<double>& grad();             // allocates zero-filled on demand
  const std::vector<double>& grad() const; // throws when absent
  void clear_grad();

  std::shared_ptr<TensorImpl> impl;
};

class Graph {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;  // reads output grad, accumulates into inputs
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void()> backward);
  void backward(const Tensor& loss);
  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  static Graph* current();

 private:
  friend class GraphScope;
  friend class NoGradScope;
  std::vector<Record> records_;
};

// RAII: makes g the recording tape for this thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_;
};

// RAII: suspends recording (frozen modules, evaluation, data generation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* prev_;
};

// zero-filled gradient buffer, allocated on first touch
std::vector<double>& ensure_grad(const std::shared_ptr<TensorImpl>& t);

}  // namespace geohand
