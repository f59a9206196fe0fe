#include "mega/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mega/error.hpp"

namespace mega {

using detail::Node;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) MEGA_CHECK(d > 0, "tensor dimensions must be positive, got " << shape_str(shape));
  MEGA_CHECK(shape_numel(shape) == data.size(),
             "shape " << shape_str(shape) << " does not match " << data.size() << " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Gradient buffer of an input, or nullptr when it does not need one.
double* grad_of(const Tensor& t) {
  const auto& n = t.node();
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  MEGA_CHECK(a.shape() == b.shape(),
             op << ": shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  MEGA_CHECK(axis < shape.size(), op << ": axis " << axis << " invalid for shape " << shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class F, class G>
Tensor unary(const Tensor& x, const char* op, F forward, G derivative) {
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xd[i]);
  return Tensor::make_result(x.shape(), std::move(out), op, {x}, [x, derivative](const Node& self) {
    double* gx = grad_of(x);
    if (!gx) return;
    auto xd = x.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * derivative(xd[i], self.data[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  MEGA_CHECK(node_, "undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  MEGA_CHECK(node_, "undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  MEGA_CHECK(size() == 1, "item() on tensor of shape " << shape_str(shape()));
  return node_->data[0];
}

std::span<double> Tensor::mutable_data() {
  MEGA_CHECK(node_ && node_->is_leaf(), "only leaf tensors can be modified in place");
  return node_->data;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }
const char* Tensor::op() const { return node_ ? node_->op : "undefined"; }

std::span<const double> Tensor::grad() const {
  MEGA_CHECK(node_, "undefined tensor");
  return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::make_result(Shape shape, std::vector<double> data, const char* op,
                           std::vector<Tensor> inputs,
                           std::function<void(const Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->backward_fn = std::move(backward_fn);
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node_);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  MEGA_CHECK(node_, "backward on undefined tensor");
  MEGA_CHECK(node_->data.size() == 1, "backward requires a scalar loss, got shape " << shape_str(node_->shape));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: each node appears once, after all its parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->is_leaf()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf() && (*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, [a, b](const Node& self) {
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b}, [a, b](const Node& self) {
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [a, b](const Node& self) {
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * b[i];
    if (double* gb = grad_of(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * a[i];
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor rsub_scalar(double s, const Tensor& x) {
  return unary(x, "rsub_scalar", [s](double v) { return s - v; }, [](double, double) { return -1.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  static const double lo = std::numeric_limits<double>::min();
  static const double hi = std::nextafter(1.0, 0.0);
  return unary(
      x, "sigmoid",
      [](double v) {
        const double y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return std::clamp(y, lo, hi);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary(x, "clamp_min", [floor](double v) { return v > floor ? v : floor; },
               [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, "sum", {x}, [x](const Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor l2_norm(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "l2_norm");
  Shape out_shape;
  for (std::size_t i = 0; i < x.dim(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::vector<double> out(s.outer * s.inner, 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.len; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double v = xd[(o * s.len + a) * s.inner + i];
        out[o * s.inner + i] += v * v;
      }
  for (auto& v : out) v = std::sqrt(v);

  return Tensor::make_result(std::move(out_shape), std::move(out), "l2_norm", {x}, [x, s](const Node& self) {
    double* gx = grad_of(x);
    if (!gx) return;
    auto xd = x.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double n = self.data[o * s.inner + i];
        if (n == 0.0) continue;
        const double g = self.grad[o * s.inner + i] / n;
        for (std::size_t a = 0; a < s.len; ++a) {
          const std::size_t idx = (o * s.len + a) * s.inner + i;
          gx[idx] += g * xd[idx];
        }
      }
  });
}

Tensor normalize_rows(const Tensor& x) {
  MEGA_CHECK(x.dim() == 2, "normalize_rows expects a matrix, got " << shape_str(x.shape()));
  const std::size_t R = x.shape()[0], C = x.shape()[1];
  std::vector<double> out(x.data().begin(), x.data().end()), norms(R, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < C; ++c) n += out[r * C + c] * out[r * C + c];
    norms[r] = std::sqrt(n);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = norms[r] < kCosineEps ? 0.0 : out[r * C + c] / norms[r];
  }
  return Tensor::make_result(x.shape(), std::move(out), "normalize_rows", {x},
                             [x, R, C, norms = std::move(norms)](const Node& self) {
                               double* gx = grad_of(x);
                               if (!gx) return;
                               for (std::size_t r = 0; r < R; ++r) {
                                 if (norms[r] < kCosineEps) continue;
                                 double yg = 0.0;
                                 for (std::size_t c = 0; c < C; ++c) yg += self.data[r * C + c] * self.grad[r * C + c];
                                 for (std::size_t c = 0; c < C; ++c)
                                   gx[r * C + c] += (self.grad[r * C + c] - self.data[r * C + c] * yg) / norms[r];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation and linear algebra

Tensor reshape(const Tensor& x, Shape shape) {
  MEGA_CHECK(shape_numel(shape) == x.size(),
             "reshape: cannot view " << shape_str(x.shape()) << " as " << shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), "reshape", {x}, [x](const Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  MEGA_CHECK(x.dim() == 2, "transpose expects rank 2, got " << shape_str(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  return Tensor::make_result({c, r}, std::move(out), "transpose", {x}, [x, r, c](const Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  MEGA_CHECK(a.dim() == 2 && b.dim() == 2 && a.shape()[1] == b.shape()[0],
             "matmul: incompatible shapes " << shape_str(a.shape()) << " and " << shape_str(b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  std::vector<double> out(n * m, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd.data() + p * m;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  return Tensor::make_result({n, m}, std::move(out), "matmul", {a, b}, [a, b, n, k, m](const Node& self) {
    auto ad = a.data();
    auto bd = b.data();
    const double* g = self.grad.data();
    if (double* ga = grad_of(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bd[p * m + j];
          ga[i * k + p] += acc;
        }
    if (double* gb = grad_of(b))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
        }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  MEGA_CHECK(x.dim() == 2, "gather_rows expects rank 2, got " << shape_str(x.shape()));
  MEGA_CHECK(!rows.empty(), "gather_rows: empty row selection");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * c);
  auto xd = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    MEGA_CHECK(idx[r] < n, "gather_rows: row " << idx[r] << " out of range " << n);
    std::copy_n(xd.begin() + idx[r] * c, c, out.begin() + r * c);
  }
  const std::size_t count = idx.size();
  return Tensor::make_result({count, c}, std::move(out), "gather_rows", {x},
                             [x, idx = std::move(idx), c](const Node& self) {
                               double* gx = grad_of(x);
                               if (!gx) return;
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < c; ++j) gx[idx[r] * c + j] += self.grad[r * c + j];
                             });
}

Tensor masked_select(const Tensor& map, std::span<const double> mask) {
  MEGA_CHECK(map.dim() == 3, "masked_select expects C×H×W, got " << shape_str(map.shape()));
  const std::size_t C = map.shape()[0], HW = map.shape()[1] * map.shape()[2];
  MEGA_CHECK(mask.size() == HW, "masked_select: mask has " << mask.size() << " entries, map has " << HW << " locations");
  std::vector<std::size_t> locs;
  for (std::size_t l = 0; l < HW; ++l)
    if (mask[l] != 0.0) locs.push_back(l);
  MEGA_CHECK(!locs.empty(), "masked_select: mask selects no locations");
  std::vector<double> out(locs.size() * C);
  auto md = map.data();
  for (std::size_t r = 0; r < locs.size(); ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = md[c * HW + locs[r]];
  const std::size_t rows = locs.size();
  return Tensor::make_result({rows, C}, std::move(out), "masked_select", {map},
                             [map, locs = std::move(locs), C, HW](const Node& self) {
                               double* gm = grad_of(map);
                               if (!gm) return;
                               for (std::size_t r = 0; r < locs.size(); ++r)
                                 for (std::size_t c = 0; c < C; ++c) gm[c * HW + locs[r]] += self.grad[r * C + c];
                             });
}

Tensor mask_multiply(const Tensor& map, std::span<const double> mask) {
  MEGA_CHECK(map.dim() == 3, "mask_multiply expects C×H×W, got " << shape_str(map.shape()));
  const std::size_t C = map.shape()[0], HW = map.shape()[1] * map.shape()[2];
  MEGA_CHECK(mask.size() == HW, "mask_multiply: mask has " << mask.size() << " entries, map has " << HW << " locations");
  std::vector<double> m(mask.begin(), mask.end());
  std::vector<double> out(map.size());
  auto md = map.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < HW; ++l) out[c * HW + l] = md[c * HW + l] * m[l];
  return Tensor::make_result(map.shape(), std::move(out), "mask_multiply", {map},
                             [map, m = std::move(m), C, HW](const Node& self) {
                               double* gm = grad_of(map);
                               if (!gm) return;
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t l = 0; l < HW; ++l) gm[c * HW + l] += self.grad[c * HW + l] * m[l];
                             });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) mx = std::max(mx, xd[base + a * s.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) {
        const double e = std::exp(xd[base + a * s.inner] - mx);
        out[base + a * s.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < s.len; ++a) out[base + a * s.inner] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(out), "softmax", {x}, [x, s](const Node& self) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < s.len; ++a) dot += self.grad[base + a * s.inner] * self.data[base + a * s.inner];
        for (std::size_t a = 0; a < s.len; ++a) {
          const std::size_t idx = base + a * s.inner;
          gx[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  MEGA_CHECK(logits.dim() == 2, "cross_entropy expects N×classes logits, got " << shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  MEGA_CHECK(targets.size() == n, "cross_entropy: " << targets.size() << " targets for " << n << " rows");
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> probs(n * k);
  auto ld = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    MEGA_CHECK(tgt[i] < k, "cross_entropy: target " << tgt[i] << " out of range " << k);
    const double* row = ld.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[tgt[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result({1}, {loss}, "cross_entropy", {logits},
                             [logits, tgt = std::move(tgt), probs = std::move(probs), n, k](const Node& self) {
                               double* gl = grad_of(logits);
                               if (!gl) return;
                               const double g = self.grad[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < k; ++j)
                                   gl[i * k + j] += g * (probs[i * k + j] - (j == tgt[i] ? 1.0 : 0.0));
                             });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Visits every (output location, shifted input location) pair of a
// same-padded k×k tap at offset (dy, dx), restricted to the valid range.
template <class F>
void for_each_tap_row(std::size_t H, std::size_t W, long dy, long dx, F f) {
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
  const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
  if (x0 >= x1) return;
  for (long y = y0; y < y1; ++y) f(y * w + x0, (y + dy) * w + x0 + dx, static_cast<std::size_t>(x1 - x0));
}

// Patch matrix of a same-padded k×k convolution: row (ci·k + ky)·k + kx holds
// channel ci shifted by the tap offset, zero where the tap leaves the grid.
std::vector<double> im2col(const double* x, std::size_t Cin, std::size_t H, std::size_t W, std::size_t k) {
  const std::size_t HW = H * W;
  const long pad = static_cast<long>(k / 2);
  std::vector<double> col(Cin * k * k * HW, 0.0);
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* c = col.data() + ((ci * k + ky) * k + kx) * HW;
        const double* in = x + ci * HW;
        for_each_tap_row(H, W, static_cast<long>(ky) - pad, static_cast<long>(kx) - pad,
                         [&](std::size_t oi, std::size_t ii, std::size_t len) { std::copy_n(in + ii, len, c + oi); });
      }
  return col;
}

void col2im_add(const double* col, double* gx, std::size_t Cin, std::size_t H, std::size_t W, std::size_t k) {
  const std::size_t HW = H * W;
  const long pad = static_cast<long>(k / 2);
  for (std::size_t ci = 0; ci < Cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* c = col + ((ci * k + ky) * k + kx) * HW;
        double* g = gx + ci * HW;
        for_each_tap_row(H, W, static_cast<long>(ky) - pad, static_cast<long>(kx) - pad,
                         [&](std::size_t oi, std::size_t ii, std::size_t len) {
                           for (std::size_t t = 0; t < len; ++t) g[ii + t] += c[oi + t];
                         });
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  MEGA_CHECK(x.dim() == 3, "conv2d expects C×H×W input, got " << shape_str(x.shape()));
  MEGA_CHECK(kernel.dim() == 4, "conv2d expects C_out×C_in×k×k kernel, got " << shape_str(kernel.shape()));
  const std::size_t Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t Cout = kernel.shape()[0], k = kernel.shape()[2];
  MEGA_CHECK(kernel.shape()[1] == Cin,
             "conv2d: kernel expects " << kernel.shape()[1] << " input channels, got " << Cin);
  MEGA_CHECK(kernel.shape()[3] == k && (k == 1 || k == 3), "conv2d: kernel must be 1×1 or 3×3");
  const bool has_bias = bias.defined();
  if (has_bias) MEGA_CHECK(bias.size() == Cout, "conv2d: bias has " << bias.size() << " entries, expected " << Cout);
  const std::size_t HW = H * W, R = Cin * k * k;

  // out = kernel (Cout×R) · col (R×HW); a 1×1 kernel uses the input as is.
  auto col = std::make_shared<std::vector<double>>(k == 1 ? std::vector<double>(x.data().begin(), x.data().end())
                                                          : im2col(x.data().data(), Cin, H, W, k));
  std::vector<double> out(Cout * HW, 0.0);
  auto kd = kernel.data();
  for (std::size_t co = 0; co < Cout; ++co) {
    double* o = out.data() + co * HW;
    if (has_bias) std::fill(o, o + HW, bias[co]);
    for (std::size_t r = 0; r < R; ++r) {
      const double wv = kd[co * R + r];
      const double* c = col->data() + r * HW;
      for (std::size_t l = 0; l < HW; ++l) o[l] += wv * c[l];
    }
  }

  std::vector<Tensor> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(
      {Cout, H, W}, std::move(out), "conv2d", std::move(inputs),
      [x, kernel, bias, has_bias, col, Cin, Cout, H, W, k, HW, R](const Node& self) {
        auto kd = kernel.data();
        double* gx = grad_of(x);
        double* gk = grad_of(kernel);
        double* gb = has_bias ? grad_of(bias) : nullptr;
        const double* go = self.grad.data();
        if (gb)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t l = 0; l < HW; ++l) gb[co] += go[co * HW + l];
        if (gk)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t r = 0; r < R; ++r) {
              const double* c = col->data() + r * HW;
              double acc = 0.0;
              for (std::size_t l = 0; l < HW; ++l) acc += go[co * HW + l] * c[l];
              gk[co * R + r] += acc;
            }
        if (gx) {
          std::vector<double> gcol(R * HW, 0.0);
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t r = 0; r < R; ++r) {
              const double wv = kd[co * R + r];
              double* g = gcol.data() + r * HW;
              for (std::size_t l = 0; l < HW; ++l) g[l] += wv * go[co * HW + l];
            }
          if (k == 1)
            for (std::size_t i = 0; i < R * HW; ++i) gx[i] += gcol[i];
          else
            col2im_add(gcol.data(), gx, Cin, H, W, k);
        }
      });
}

// ---------------------------------------------------------------------------
// Similarity and gradient reversal

Tensor cosine_map(const Tensor& a, const Tensor& b) {
  MEGA_CHECK(a.dim() == 3, "cosine_map expects C×H×W maps, got " << shape_str(a.shape()));
  check_same_shape(a, b, "cosine_map");
  const std::size_t C = a.shape()[0], H = a.shape()[1], W = a.shape()[2], HW = H * W;
  std::vector<double> out(HW, 0.0), na(HW, 0.0), nb(HW, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < HW; ++l) {
      const double av = ad[c * HW + l], bv = bd[c * HW + l];
      out[l] += av * bv;
      na[l] += av * av;
      nb[l] += bv * bv;
    }
  for (std::size_t l = 0; l < HW; ++l) {
    na[l] = std::sqrt(na[l]);
    nb[l] = std::sqrt(nb[l]);
    out[l] = (na[l] < kCosineEps || nb[l] < kCosineEps) ? 0.0 : out[l] / (na[l] * nb[l]);
  }
  return Tensor::make_result(
      {H, W}, std::move(out), "cosine_map", {a, b},
      [a, b, C, HW, na = std::move(na), nb = std::move(nb)](const Node& self) {
        auto ad = a.data();
        auto bd = b.data();
        double* ga = grad_of(a);
        double* gb = grad_of(b);
        for (std::size_t l = 0; l < HW; ++l) {
          if (na[l] < kCosineEps || nb[l] < kCosineEps) continue;
          const double g = self.grad[l], cs = self.data[l];
          const double inv = 1.0 / (na[l] * nb[l]);
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = c * HW + l;
            if (ga) ga[i] += g * (bd[i] * inv - cs * ad[i] / (na[l] * na[l]));
            if (gb) gb[i] += g * (ad[i] * inv - cs * bd[i] / (nb[l] * nb[l]));
          }
        }
      });
}

Tensor grl(const Tensor& x, double coeff) {
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(x.shape(), std::move(out), "grl", {x}, [x, coeff](const Node& self) {
    if (double* gx = grad_of(x))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] -= coeff * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference check

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::span<Tensor> inputs, double h) {
  for (auto& t : inputs) {
    MEGA_CHECK(t.is_leaf() && t.requires_grad(), "check_gradients: inputs must be leaves requiring grad");
    t.zero_grad();
  }
  loss_fn().backward();

  GradCheckResult result;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto values = t.mutable_data();
    double diff2 = 0.0, an2 = 0.0, nu2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = loss_fn().item();
      values[i] = saved - h;
      const double fm = loss_fn().item();
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      an2 += analytic[i] * analytic[i];
      nu2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-12});
    const double rel = std::sqrt(diff2) / denom;
    result.rel_error.push_back(rel);
    result.max_rel_error = std::max(result.max_rel_error, rel);
  }
  return result;
}

}  // namespace mega
