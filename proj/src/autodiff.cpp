#include "mblend/autodiff.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace mblend::ad {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<std::vector<Var>(const Var&)>;

Var make(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

}  // namespace

double Var::item() const {
  if (value().size() != 1) throw std::logic_error("item() on a non-scalar Var");
  return value()(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

FreezeGuard::FreezeGuard(std::vector<Var> leaves) : leaves_(std::move(leaves)) {
  for (auto& leaf : leaves_) {
    previous_.push_back(leaf.node()->requires_grad);
    leaf.node()->requires_grad = false;
  }
}

FreezeGuard::~FreezeGuard() {
  for (size_t i = 0; i < leaves_.size(); ++i) leaves_[i].node()->requires_grad = previous_[i];
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  if (output.value().size() != 1) throw std::invalid_argument("grad: output must be 1x1");
  std::vector<Var> result;
  result.reserve(inputs.size());
  if (!output.requires_grad()) {
    for (const auto& in : inputs) result.push_back(constant(Matrix::Zero(in.rows(), in.cols())));
    return result;
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;
  std::vector<std::pair<Node*, size_t>> stack{{output.node(), 0}};
  visited[output.node()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].node();
      if (child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<Node*, Var> grads;
  grads[output.node()] = constant(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->backward) continue;
    const Var g = found->second;
    std::vector<Var> input_grads = node->backward(g);
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].node();
      if (!in->requires_grad || !input_grads[i].defined()) continue;
      auto existing = grads.find(in);
      if (existing == grads.end()) {
        grads.emplace(in, input_grads[i]);
      } else {
        existing->second = add(existing->second, input_grads[i]);
      }
    }
  }

  for (const auto& in : inputs) {
    auto found = grads.find(in.node());
    result.push_back(found != grads.end() ? found->second : constant(Matrix::Zero(in.rows(), in.cols())));
  }
  return result;
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](const Var& g) { return std::vector<Var>{g, neg(g)}; });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a, b},
              [a, b](const Var& g) { return std::vector<Var>{mul(g, b), mul(g, a)}; });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  return make(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](const Var& g) {
    const Var ga = div(g, b);
    return std::vector<Var>{ga, neg(div(mul(ga, a), b))};
  });
}

Var neg(const Var& a) {
  return make(-a.value(), {a}, [](const Var& g) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var& a, double factor) {
  return make(a.value() * factor, {a}, [factor](const Var& g) { return std::vector<Var>{scale(g, factor)}; });
}

Var add_scalar(const Var& a, double value) {
  return make(a.value().array() + value, {a}, [](const Var& g) { return std::vector<Var>{g}; });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  Matrix value = a.value() * b.value();
  return make(std::move(value), {a, b}, [a, b](const Var& g) {
    return std::vector<Var>{a.requires_grad() ? matmul(g, transpose(b)) : Var(),
                            b.requires_grad() ? matmul(transpose(a), g) : Var()};
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a}, [](const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var mul_const(const Var& a, const Matrix& mask) {
  if (a.rows() != mask.rows() || a.cols() != mask.cols()) throw std::invalid_argument("mul_const: shape mismatch");
  return make(a.value().cwiseProduct(mask), {a}, [mask](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var add_col_bias(const Var& x, const Var& bias) {
  if (bias.cols() != 1 || bias.rows() != x.rows()) throw std::invalid_argument("add_col_bias: bias must be C x 1");
  Matrix value = x.value().colwise() + bias.value().col(0);
  return make(std::move(value), {x, bias}, [](const Var& g) { return std::vector<Var>{g, sum_cols(g)}; });
}

Var sum_cols(const Var& x) {
  const Index n = x.cols();
  return make(x.value().rowwise().sum(), {x}, [n](const Var& g) { return std::vector<Var>{broadcast_cols(g, n)}; });
}

Var broadcast_cols(const Var& x, Index cols) {
  if (x.cols() != 1) throw std::invalid_argument("broadcast_cols: input must be a column");
  return make(x.value().replicate(1, cols), {x}, [](const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

Var sum_rows(const Var& x) {
  const Index n = x.rows();
  return make(x.value().colwise().sum(), {x}, [n](const Var& g) { return std::vector<Var>{broadcast_rows(g, n)}; });
}

Var broadcast_rows(const Var& x, Index rows) {
  if (x.rows() != 1) throw std::invalid_argument("broadcast_rows: input must be a row");
  return make(x.value().replicate(rows, 1), {x}, [](const Var& g) { return std::vector<Var>{sum_rows(g)}; });
}

Var sum(const Var& x) {
  const Index r = x.rows();
  const Index c = x.cols();
  return make(Matrix::Constant(1, 1, x.value().sum()), {x},
              [r, c](const Var& g) { return std::vector<Var>{broadcast_scalar(g, r, c)}; });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var broadcast_scalar(const Var& s, Index rows, Index cols) {
  if (s.value().size() != 1) throw std::invalid_argument("broadcast_scalar: input must be 1x1");
  return make(Matrix::Constant(rows, cols, s.value()(0, 0)), {s},
              [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var leaky_relu(const Var& x, double slope) {
  const Matrix mask = (x.value().array() > 0.0).select(Matrix::Ones(x.rows(), x.cols()), slope);
  return make(x.value().cwiseProduct(mask), {x}, [mask](const Var& g) { return std::vector<Var>{mul_const(g, mask)}; });
}

Var abs(const Var& x) {
  const Matrix sign = x.value().array().sign().matrix();
  return make(x.value().cwiseAbs(), {x}, [sign](const Var& g) { return std::vector<Var>{mul_const(g, sign)}; });
}

Var square(const Var& x) {
  return make(x.value().cwiseAbs2(), {x}, [x](const Var& g) { return std::vector<Var>{mul(g, scale(x, 2.0))}; });
}

Var sqrt(const Var& x) {
  Matrix value = x.value().cwiseSqrt();
  return make(std::move(value), {x}, [x](const Var& g) {
    return std::vector<Var>{div(scale(g, 0.5), sqrt(x))};
  });
}

Var sigmoid(const Var& x) {
  Matrix value = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  return make(std::move(value), {x}, [x](const Var& g) {
    const Var s = sigmoid(x);
    return std::vector<Var>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
  });
}

Var rows(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw std::out_of_range("rows: slice out of range");
  const Index total = x.rows();
  return make(x.value().middleRows(start, count), {x},
              [start, total](const Var& g) { return std::vector<Var>{pad_rows(g, start, total)}; });
}

Var pad_rows(const Var& x, Index start, Index total) {
  if (start < 0 || start + x.rows() > total) throw std::out_of_range("pad_rows: out of range");
  Matrix value = Matrix::Zero(total, x.cols());
  value.middleRows(start, x.rows()) = x.value();
  const Index count = x.rows();
  return make(std::move(value), {x}, [start, count](const Var& g) { return std::vector<Var>{rows(g, start, count)}; });
}

Var cols(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw std::out_of_range("cols: slice out of range");
  const Index total = x.cols();
  return make(x.value().middleCols(start, count), {x},
              [start, total](const Var& g) { return std::vector<Var>{pad_cols(g, start, total)}; });
}

Var pad_cols(const Var& x, Index start, Index total) {
  if (start < 0 || start + x.cols() > total) throw std::out_of_range("pad_cols: out of range");
  Matrix value = Matrix::Zero(x.rows(), total);
  value.middleCols(start, x.cols()) = x.value();
  const Index count = x.cols();
  return make(std::move(value), {x}, [start, count](const Var& g) { return std::vector<Var>{cols(g, start, count)}; });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix value(total, parts.front().cols());
  std::vector<Index> starts;
  Index offset = 0;
  for (const auto& p : parts) {
    value.middleRows(offset, p.rows()) = p.value();
    starts.push_back(offset);
    offset += p.rows();
  }
  return make(std::move(value), parts, [parts, starts](const Var& g) {
    std::vector<Var> out;
    for (size_t i = 0; i < parts.size(); ++i) out.push_back(rows(g, starts[i], parts[i].rows()));
    return out;
  });
}

Var gather(const Var& x, std::shared_ptr<const IndexMap> map) {
  if (x.rows() != map->source_rows || x.cols() != map->source_cols) throw std::invalid_argument("gather: shape mismatch");
  Matrix value(map->out_rows, map->out_cols);
  const double* src = x.value().data();
  double* dst = value.data();
  const size_t n = map->source.size();
  for (size_t k = 0; k < n; ++k) dst[k] = map->source[k] >= 0 ? src[map->source[k]] : 0.0;
  return make(std::move(value), {x}, [map](const Var& g) { return std::vector<Var>{scatter_add(g, map)}; });
}

Var scatter_add(const Var& x, std::shared_ptr<const IndexMap> map) {
  if (x.rows() != map->out_rows || x.cols() != map->out_cols) throw std::invalid_argument("scatter_add: shape mismatch");
  Matrix value = Matrix::Zero(map->source_rows, map->source_cols);
  const double* src = x.value().data();
  double* dst = value.data();
  const size_t n = map->source.size();
  for (size_t k = 0; k < n; ++k)
    if (map->source[k] >= 0) dst[map->source[k]] += src[k];
  return make(std::move(value), {x}, [map](const Var& g) { return std::vector<Var>{gather(g, map)}; });
}

}  // namespace mblend::ad
