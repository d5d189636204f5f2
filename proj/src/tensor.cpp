#include "geohand/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace geohand {

namespace {
std::atomic<uint64_t> g_next_id{1};
thread_local Graph* g_current_graph = nullptr;
}  // namespace

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) fail("tensor: negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
  impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(numel_of(impl->shape)), 0.0);
  impl->requires_grad = requires_grad;
  impl->id = g_next_id.fetch_add(1);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.impl->data) x = v;
  return t;
}

Tensor Tensor::scalar(double v) { return full({}, v); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
  if (numel_of(shape) != static_cast<int64_t>(data.size()))
    fail("tensor: data size " + std::to_string(data.size()) + " does not match shape " +
         shape_str(shape));
  Tensor t;
  t.impl = std::make_shared<TensorImpl>();
  t.impl->shape = std::move(shape);
  t.impl->data = std::move(data);
  t.impl->id = g_next_id.fetch_add(1);
  return t;
}

const std::vector<int>& Tensor::shape() const {
  if (!impl) fail("tensor: use of undefined tensor");
  return impl->shape;
}

int Tensor::extent(int axis) const {
  const auto& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    fail("tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

int64_t Tensor::numel() const { return numel_of(shape()); }

double* Tensor::data() {
  if (!impl) fail("tensor: use of undefined tensor");
  return impl->data.data();
}

const double* Tensor::data() const {
  if (!impl) fail("tensor: use of undefined tensor");
  return impl->data.data();
}

double Tensor::value() const {
  if (!impl) fail("tensor: use of undefined tensor");
  if (impl->data.size() != 1)
    fail("tensor: value() on non-scalar of shape " + shape_str(impl->shape));
  return impl->data[0];
}

double Tensor::at(const std::vector<int>& idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) fail("tensor: at() rank mismatch for shape " + shape_str(s));
  int64_t off = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= s[i]) fail("tensor: at() index out of range");
    off = off * s[i] + idx[i];
  }
  return impl->data[static_cast<size_t>(off)];
}

bool Tensor::requires_grad() const { return impl && impl->requires_grad; }

Tensor& Tensor::set_requires_grad(bool b) {
  if (!impl) fail("tensor: use of undefined tensor");
  impl->requires_grad = b;
  return *this;
}

bool Tensor::has_grad() const { return impl && !impl->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!impl) fail("tensor: use of undefined tensor");
  return ensure_grad(impl);
}

const std::vector<double>& Tensor::grad() const {
  if (!impl || impl->grad.empty()) fail("tensor: gradient not populated");
  return impl->grad;
}

void Tensor::clear_grad() {
  if (impl) impl->grad.clear();
}

std::vector<double>& ensure_grad(const std::shared_ptr<TensorImpl>& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

void Graph::record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
                   std::function<void()> backward) {
  Record r;
  r.op = op;
  r.inputs.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (!t.defined()) fail(std::string(op) + ": undefined input tensor");
    r.inputs.push_back(t.impl);
  }
  if (!output.defined()) fail(std::string(op) + ": undefined output tensor");
  r.output = output.impl;
  r.backward = std::move(backward);
  records_.push_back(std::move(r));
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward: undefined loss");
  if (loss.impl->data.size() != 1)
    fail("backward: loss must be a scalar, got shape " + shape_str(loss.impl->shape));

  ensure_grad(loss.impl);
  loss.impl->grad[0] = 1.0;

  // which impls are produced inside this graph (non-leaves)
  std::unordered_set<const TensorImpl*> produced;
  produced.reserve(records_.size());
  for (const auto& r : records_) produced.insert(r.output.get());

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // unreachable from loss
    if (it->backward) it->backward();
  }

  // a requires_grad leaf that fed recorded ops but received no gradient is a
  // wiring bug, not a silent zero
  for (const auto& r : records_) {
    for (const auto& in : r.inputs) {
      if (in->requires_grad && !produced.count(in.get()) && in->grad.empty()) {
        fail("backward: leaf tensor #" + std::to_string(in->id) + " of shape " +
             shape_str(in->shape) + " used by op '" + r.op + "' is unreachable from the loss");
      }
    }
  }
}

Graph* Graph::current() { return g_current_graph; }

GraphScope::GraphScope(Graph& g) : prev_(g_current_graph) { g_current_graph = &g; }
GraphScope::~GraphScope() { g_current_graph = prev_; }

NoGradScope::NoGradScope() : prev_(g_current_graph) { g_current_graph = nullptr; }
NoGradScope::~NoGradScope() { g_current_graph = prev_; }

}  // namespace geohand
