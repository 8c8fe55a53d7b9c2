#include "uqmd/diffnum.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace uqmd::ad {

double act_value(Act k, double x) {
  switch (k) {
    case Act::Tanh: return std::tanh(x);
    case Act::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Act::Softplus: return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    case Act::Exp: return std::exp(x);
    case Act::Log: return std::log(x);
    case Act::Square: return x * x;
    case Act::Sqrt: return std::sqrt(x);
  }
  throw InvalidInputError("bad activation enum");
}

double act_first(Act k, double x) {
  switch (k) {
    case Act::Tanh: {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Act::Sigmoid: {
      double s = act_value(Act::Sigmoid, x);
      return s * (1.0 - s);
    }
    case Act::Softplus: return act_value(Act::Sigmoid, x);
    case Act::Exp: return std::exp(x);
    case Act::Log: return 1.0 / x;
    case Act::Square: return 2.0 * x;
    case Act::Sqrt: return 0.5 / std::max(std::sqrt(x), 1e-150);
  }
  throw InvalidInputError("bad activation enum");
}

double act_second(Act k, double x) {
  switch (k) {
    case Act::Tanh: {
      double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
    case Act::Sigmoid: {
      double s = act_value(Act::Sigmoid, x);
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
    case Act::Softplus: {
      double s = act_value(Act::Sigmoid, x);
      return s * (1.0 - s);
    }
    case Act::Exp: return std::exp(x);
    case Act::Log: return -1.0 / (x * x);
    case Act::Square: return 2.0;
    case Act::Sqrt: {
      double r = std::max(std::sqrt(x), 1e-150);
      return -0.25 / (r * r * r);
    }
  }
  throw InvalidInputError("bad activation enum");
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::at(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw InvalidInputError("tape: invalid node handle");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::leaf(const MatrixXd& value) {
  Node n;
  n.op = Op::Leaf;
  n.value = value;
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::constant(const MatrixXd& value) {
  Node n;
  n.op = Op::Const;
  n.value = value;
  return push(std::move(n));
}

namespace {
void check_same_shape(const MatrixXd& a, const MatrixXd& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string("tape: shape mismatch in ") + what);
}
}  // namespace

Var Tape::add(Var a, Var b) {
  const Node &na = at(a), &nb = at(b);
  check_same_shape(na.value, nb.value, "add");
  Node n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  n.value = na.value + nb.value;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const Node &na = at(a), &nb = at(b);
  check_same_shape(na.value, nb.value, "sub");
  Node n;
  n.op = Op::Sub;
  n.a = a.id;
  n.b = b.id;
  n.value = na.value - nb.value;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::add_bias(Var x, Var b) {
  const Node &nx = at(x), &nb = at(b);
  if (nb.value.cols() != 1 || nb.value.rows() != nx.value.rows())
    throw DimensionError("tape: add_bias needs an (n x 1) bias matching x rows");
  Node n;
  n.op = Op::AddBias;
  n.a = x.id;
  n.b = b.id;
  n.value = nx.value.colwise() + Eigen::VectorXd(nb.value.col(0));
  n.needs_grad = nx.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::hadamard(Var a, Var b) {
  const Node &na = at(a), &nb = at(b);
  check_same_shape(na.value, nb.value, "hadamard");
  Node n;
  n.op = Op::Hadamard;
  n.a = a.id;
  n.b = b.id;
  n.value = na.value.cwiseProduct(nb.value);
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
  const Node& na = at(a);
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.c0 = c;
  n.value = c * na.value;
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

Var Tape::add_const(Var a, double c) {
  const Node& na = at(a);
  Node n;
  n.op = Op::AddConst;
  n.a = a.id;
  n.c0 = c;
  n.value = na.value.array() + c;
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Node &na = at(a), &nb = at(b);
  if (na.value.cols() != nb.value.rows()) throw DimensionError("tape: matmul shape mismatch");
  Node n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.value = na.value * nb.value;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::matmul_masked(Var a, Var b, const MatrixXd* mask) {
  const Node &na = at(a), &nb = at(b);
  if (!mask) throw InvalidInputError("tape: null mask");
  check_same_shape(na.value, *mask, "matmul_masked mask");
  if (na.value.cols() != nb.value.rows())
    throw DimensionError("tape: matmul_masked shape mismatch");
  Node n;
  n.op = Op::MatMulMasked;
  n.a = a.id;
  n.b = b.id;
  n.mask = mask;
  n.value = mask->cwiseProduct(na.value) * nb.value;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::matmul_ta(Var a, Var b) {
  const Node &na = at(a), &nb = at(b);
  if (na.value.rows() != nb.value.rows()) throw DimensionError("tape: matmul_ta shape mismatch");
  Node n;
  n.op = Op::MatMulTA;
  n.a = a.id;
  n.b = b.id;
  n.value = na.value.transpose() * nb.value;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

Var Tape::spectral_scale(Var w, const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
  const Node& nw = at(w);
  if (u.size() != nw.value.rows() || v.size() != nw.value.cols())
    throw DimensionError("tape: spectral_scale u/v shapes");
  Node n;
  n.op = Op::SpectralScale;
  n.a = w.id;
  n.u = u;
  n.v = v;
  n.sigma = std::max(u.dot(nw.value * v), 1e-12);
  n.value = nw.value / n.sigma;
  n.needs_grad = nw.needs_grad;
  return push(std::move(n));
}

Var Tape::apply(Act k, Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::Apply;
  n.a = x.id;
  n.act = k;
  n.value = nx.value.unaryExpr([k](double t) { return act_value(k, t); });
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::apply_prime(Act k, Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::ApplyPrime;
  n.a = x.id;
  n.act = k;
  n.value = nx.value.unaryExpr([k](double t) { return act_first(k, t); });
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::rows(Var x, int r0, int nr) {
  const Node& nx = at(x);
  if (r0 < 0 || nr < 1 || r0 + nr > nx.value.rows())
    throw DimensionError("tape: rows slice out of range");
  Node n;
  n.op = Op::Rows;
  n.a = x.id;
  n.r0 = r0;
  n.nr = nr;
  n.value = nx.value.middleRows(r0, nr);
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::reverse_rows(Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::ReverseRows;
  n.a = x.id;
  n.value = nx.value.colwise().reverse();
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::colsum(Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::ColSum;
  n.a = x.id;
  n.value = nx.value.colwise().sum();
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::sum(Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::Sum;
  n.a = x.id;
  n.value = MatrixXd::Constant(1, 1, nx.value.sum());
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::mean(Var x) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::Mean;
  n.a = x.id;
  n.value = MatrixXd::Constant(1, 1, nx.value.mean());
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

Var Tape::clamped_exp(Var x, double lo, double hi, std::uint64_t* counter) {
  const Node& nx = at(x);
  Node n;
  n.op = Op::ClampedExp;
  n.a = x.id;
  n.c0 = lo;
  n.c1 = hi;
  n.counter = counter;
  std::uint64_t events = 0;
  n.value = nx.value.unaryExpr([&](double t) {
    if (t < lo || t > hi) ++events;
    return std::exp(std::clamp(t, lo, hi));
  });
  if (counter) *counter += events;
  n.needs_grad = nx.needs_grad;
  return push(std::move(n));
}

const MatrixXd& Tape::value(Var v) const { return at(v).value; }

MatrixXd Tape::grad(Var v) const {
  const Node& n = at(v);
  if (!n.has_adj) return MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.adj;
}

void Tape::accumulate(int id, const MatrixXd& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (!n.has_adj) {
    n.adj = g;
    n.has_adj = true;
  } else {
    n.adj += g;
  }
}

void Tape::backward(Var output) {
  const Node& n = at(output);
  if (n.value.rows() != 1 || n.value.cols() != 1)
    throw InvalidInputError("tape: backward() without seed needs a scalar output");
  backward(output, MatrixXd::Constant(1, 1, 1.0));
}

void Tape::backward(Var output, const MatrixXd& seed) {
  {
    const Node& n = at(output);
    check_same_shape(n.value, seed, "backward seed");
  }
  accumulate(output.id, seed);
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_adj || !n.needs_grad) continue;
    const MatrixXd& g = n.adj;
    switch (n.op) {
      case Op::Leaf:
      case Op::Const: break;
      case Op::Add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::Sub:
        accumulate(n.a, g);
        accumulate(n.b, -g);
        break;
      case Op::AddBias:
        accumulate(n.a, g);
        accumulate(n.b, g.rowwise().sum());
        break;
      case Op::Hadamard:
        accumulate(n.a, g.cwiseProduct(nodes_[static_cast<std::size_t>(n.b)].value));
        accumulate(n.b, g.cwiseProduct(nodes_[static_cast<std::size_t>(n.a)].value));
        break;
      case Op::Scale: accumulate(n.a, n.c0 * g); break;
      case Op::AddConst: accumulate(n.a, g); break;
      case Op::MatMul: {
        const MatrixXd& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const MatrixXd& B = nodes_[static_cast<std::size_t>(n.b)].value;
        accumulate(n.a, g * B.transpose());
        accumulate(n.b, A.transpose() * g);
        break;
      }
      case Op::MatMulMasked: {
        const MatrixXd& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const MatrixXd& B = nodes_[static_cast<std::size_t>(n.b)].value;
        accumulate(n.a, (g * B.transpose()).cwiseProduct(*n.mask));
        accumulate(n.b, n.mask->cwiseProduct(A).transpose() * g);
        break;
      }
      case Op::MatMulTA: {
        const MatrixXd& A = nodes_[static_cast<std::size_t>(n.a)].value;
        const MatrixXd& B = nodes_[static_cast<std::size_t>(n.b)].value;
        accumulate(n.a, B * g.transpose());
        accumulate(n.b, A * g);
        break;
      }
      case Op::SpectralScale: {
        double inner = (g.cwiseProduct(n.value)).sum() / n.sigma;
        accumulate(n.a, MatrixXd(g / n.sigma - inner * (n.u * n.v.transpose())));
        break;
      }
      case Op::Apply: {
        const MatrixXd& x = nodes_[static_cast<std::size_t>(n.a)].value;
        Act k = n.act;
        accumulate(n.a, g.cwiseProduct(x.unaryExpr([k](double t) { return act_first(k, t); })));
        break;
      }
      case Op::ApplyPrime: {
        const MatrixXd& x = nodes_[static_cast<std::size_t>(n.a)].value;
        Act k = n.act;
        accumulate(n.a, g.cwiseProduct(x.unaryExpr([k](double t) { return act_second(k, t); })));
        break;
      }
      case Op::Rows: {
        const Node& parent = nodes_[static_cast<std::size_t>(n.a)];
        MatrixXd full = MatrixXd::Zero(parent.value.rows(), parent.value.cols());
        full.middleRows(n.r0, n.nr) = g;
        accumulate(n.a, full);
        break;
      }
      case Op::ReverseRows: accumulate(n.a, g.colwise().reverse()); break;
      case Op::ColSum: {
        const Node& parent = nodes_[static_cast<std::size_t>(n.a)];
        accumulate(n.a, MatrixXd(Eigen::VectorXd::Ones(parent.value.rows()) * g));
        break;
      }
      case Op::Sum: {
        const Node& parent = nodes_[static_cast<std::size_t>(n.a)];
        accumulate(n.a,
                   MatrixXd::Constant(parent.value.rows(), parent.value.cols(), g(0, 0)));
        break;
      }
      case Op::Mean: {
        const Node& parent = nodes_[static_cast<std::size_t>(n.a)];
        double denom = static_cast<double>(parent.value.size());
        accumulate(
            n.a, MatrixXd::Constant(parent.value.rows(), parent.value.cols(), g(0, 0) / denom));
        break;
      }
      case Op::ClampedExp: accumulate(n.a, g.cwiseProduct(n.value)); break;
    }
  }
}

MatrixXd xavier_uniform(int rows, int cols, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  MatrixXd W(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) W(i, j) = rng.uniform(-bound, bound);
  return W;
}

void DenseLayer::power_iterate(int iters) {
  if (!spec_norm) return;
  if (u.size() != W.rows()) u = Eigen::VectorXd::Ones(W.rows()).normalized();
  if (v.size() != W.cols()) v = Eigen::VectorXd::Ones(W.cols()).normalized();
  for (int i = 0; i < iters; ++i) {
    v = W.transpose() * u;
    double nv = v.norm();
    if (nv < 1e-30) {
      sigma = 1e-12;
      return;
    }
    v /= nv;
    u = W * v;
    double nu = u.norm();
    if (nu < 1e-30) {
      sigma = 1e-12;
      return;
    }
    u /= nu;
  }
  sigma = u.dot(W * v);
}

DenseNetwork::DenseNetwork(int n_in, const std::vector<int>& hidden, Act hidden_act,
                           bool spectral_hidden, Rng& init_rng)
    : n_in_(n_in), act_(hidden_act) {
  if (n_in < 1) throw ConfigError("DenseNetwork: need at least one input");
  int prev = n_in;
  for (int width : hidden) {
    if (width < 1) throw ConfigError("DenseNetwork: hidden width must be positive");
    DenseLayer l;
    l.W = xavier_uniform(width, prev, init_rng);
    l.b = MatrixXd::Zero(width, 1);
    l.spec_norm = spectral_hidden;
    layers_.push_back(std::move(l));
    prev = width;
  }
  DenseLayer out;
  out.W = xavier_uniform(1, prev, init_rng);
  out.b = MatrixXd::Zero(1, 1);
  out.spec_norm = false;
  layers_.push_back(std::move(out));
  power_iterate(10);
}

void DenseNetwork::power_iterate(int iters) {
  for (auto& l : layers_) l.power_iterate(iters);
}

Eigen::MatrixXd DenseNetwork::forward(const Eigen::MatrixXd& X) const {
  if (X.rows() != n_in_) throw DimensionError("DenseNetwork: input rows != n_in");
  MatrixXd h = X;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    const auto& l = layers_[i];
    MatrixXd z = (l.effective_weight() * h).colwise() + Eigen::VectorXd(l.b.col(0));
    h = z.unaryExpr([this](double t) { return act_value(act_, t); });
  }
  const auto& out = layers_.back();
  return (out.W * h).colwise() + Eigen::VectorXd(out.b.col(0));
}

Eigen::MatrixXd DenseNetwork::input_gradient(const Eigen::MatrixXd& X) const {
  if (X.rows() != n_in_) throw DimensionError("DenseNetwork: input rows != n_in");
  std::vector<MatrixXd> zs;
  MatrixXd h = X;
  std::vector<MatrixXd> effs;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    const auto& l = layers_[i];
    effs.push_back(l.effective_weight());
    MatrixXd z = (effs.back() * h).colwise() + Eigen::VectorXd(l.b.col(0));
    zs.push_back(z);
    h = z.unaryExpr([this](double t) { return act_value(act_, t); });
  }
  const auto& out = layers_.back();
  MatrixXd D = out.W.transpose() * MatrixXd::Ones(1, X.cols());
  for (int i = static_cast<int>(zs.size()) - 1; i >= 0; --i) {
    Act k = act_;
    MatrixXd ap = zs[static_cast<std::size_t>(i)].unaryExpr(
        [k](double t) { return act_first(k, t); });
    D = effs[static_cast<std::size_t>(i)].transpose() * ap.cwiseProduct(D);
  }
  return D;
}

DenseNetwork::TapeRefs DenseNetwork::register_params(Tape& tape) const {
  TapeRefs refs;
  for (const auto& l : layers_) {
    Var w = tape.leaf(l.W);
    refs.Ws.push_back(w);
    refs.bs.push_back(tape.leaf(l.b));
    refs.eff.push_back(l.spec_norm ? tape.spectral_scale(w, l.u, l.v) : w);
  }
  return refs;
}

DenseNetwork::ForwardVars DenseNetwork::forward_on_tape(Tape& tape, const TapeRefs& refs,
                                                        Var input) const {
  ForwardVars fwd;
  Var h = input;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    Var z = tape.add_bias(tape.matmul(refs.eff[i], h), refs.bs[i]);
    fwd.zs.push_back(z);
    h = tape.apply(act_, z);
  }
  fwd.out = tape.add_bias(tape.matmul(refs.eff.back(), h), refs.bs.back());
  return fwd;
}

Var DenseNetwork::input_gradient_on_tape(Tape& tape, const TapeRefs& refs,
                                         const ForwardVars& fwd) const {
  int batch = static_cast<int>(tape.value(fwd.out).cols());
  Var D = tape.matmul_ta(refs.eff.back(), tape.constant(MatrixXd::Ones(1, batch)));
  for (int i = static_cast<int>(fwd.zs.size()) - 1; i >= 0; --i) {
    Var ap = tape.apply_prime(act_, fwd.zs[static_cast<std::size_t>(i)]);
    D = tape.matmul_ta(refs.eff[static_cast<std::size_t>(i)], tape.hadamard(ap, D));
  }
  return D;
}

std::vector<MatrixXd*> DenseNetwork::parameters() {
  std::vector<MatrixXd*> out;
  for (auto& l : layers_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<MatrixXd> DenseNetwork::gradients(const Tape& tape, const TapeRefs& refs) const {
  std::vector<MatrixXd> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.push_back(tape.grad(refs.Ws[i]));
    out.push_back(tape.grad(refs.bs[i]));
  }
  return out;
}

namespace {

/// Degree sequences for the MADE masks. Inputs carry 1..n; hidden units
/// cycle over 1..max(n-1, 1); outputs repeat 1..n twice (location, scale).
std::vector<int> made_input_degrees(int n) {
  std::vector<int> d(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = i + 1;
  return d;
}

std::vector<int> made_hidden_degrees(int n, int width) {
  int span = std::max(n - 1, 1);
  std::vector<int> d(static_cast<std::size_t>(width));
  for (int i = 0; i < width; ++i) d[static_cast<std::size_t>(i)] = 1 + (i % span);
  return d;
}

std::vector<int> made_output_degrees(int n) {
  std::vector<int> d(static_cast<std::size_t>(2 * n));
  for (int i = 0; i < 2 * n; ++i) d[static_cast<std::size_t>(i)] = (i % n) + 1;
  return d;
}

MatrixXd made_mask(const std::vector<int>& out_deg, const std::vector<int>& in_deg,
                   bool strict) {
  MatrixXd M(static_cast<int>(out_deg.size()), static_cast<int>(in_deg.size()));
  for (std::size_t u = 0; u < out_deg.size(); ++u)
    for (std::size_t v = 0; v < in_deg.size(); ++v)
      M(static_cast<int>(u), static_cast<int>(v)) =
          (strict ? out_deg[u] > in_deg[v] : out_deg[u] >= in_deg[v]) ? 1.0 : 0.0;
  return M;
}

}  // namespace

Made::Made(int n_in, int n_hidden_layers, int hidden_width, Rng& init_rng) : n_in_(n_in) {
  if (n_in < 1) throw ConfigError("Made: need at least one input");
  if (n_hidden_layers < 1) throw ConfigError("Made: need at least one hidden layer");
  std::vector<std::vector<int>> degrees;
  degrees.push_back(made_input_degrees(n_in));
  for (int l = 0; l < n_hidden_layers; ++l)
    degrees.push_back(made_hidden_degrees(n_in, hidden_width));
  degrees.push_back(made_output_degrees(n_in));

  for (std::size_t l = 1; l < degrees.size(); ++l) {
    bool output = l + 1 == degrees.size();
    DenseLayer layer;
    int rows = static_cast<int>(degrees[l].size());
    int cols = static_cast<int>(degrees[l - 1].size());
    // Final layer weights start at zero and the scale half of its bias at +2,
    // so each sub-transformation begins as z -> sigmoid(2) z. Deep stacks then
    // keep most of their spread instead of contracting by 2^-depth.
    layer.W = output ? MatrixXd::Zero(rows, cols) : xavier_uniform(rows, cols, init_rng);
    layer.b = MatrixXd::Zero(rows, 1);
    if (output) layer.b.bottomRows(n_in).setConstant(2.0);
    layers_.push_back(std::move(layer));
    masks_.push_back(made_mask(degrees[l], degrees[l - 1], output));
  }
}

std::pair<MatrixXd, MatrixXd> Made::forward(const MatrixXd& Z) const {
  if (Z.rows() != n_in_) throw DimensionError("Made: input rows != n_in");
  MatrixXd h = Z;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    MatrixXd z =
        (masks_[i].cwiseProduct(l.W) * h).colwise() + Eigen::VectorXd(l.b.col(0));
    h = i + 1 == layers_.size() ? z : MatrixXd(z.array().tanh());
  }
  return {h.topRows(n_in_), h.bottomRows(n_in_)};
}

Made::TapeRefs Made::register_params(Tape& tape) const {
  TapeRefs refs;
  for (const auto& l : layers_) {
    refs.Ws.push_back(tape.leaf(l.W));
    refs.bs.push_back(tape.leaf(l.b));
  }
  return refs;
}

std::pair<Var, Var> Made::forward_on_tape(Tape& tape, const TapeRefs& refs, Var input) const {
  Var h = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Var z = tape.add_bias(tape.matmul_masked(refs.Ws[i], h, &masks_[i]), refs.bs[i]);
    h = i + 1 == layers_.size() ? z : tape.apply(Act::Tanh, z);
  }
  return {tape.rows(h, 0, n_in_), tape.rows(h, n_in_, n_in_)};
}

std::vector<MatrixXd*> Made::parameters() {
  std::vector<MatrixXd*> out;
  for (auto& l : layers_) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<MatrixXd> Made::gradients(const Tape& tape, const TapeRefs& refs) const {
  std::vector<MatrixXd> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.push_back(tape.grad(refs.Ws[i]));
    out.push_back(tape.grad(refs.bs[i]));
  }
  return out;
}

AdamW::AdamW(std::vector<MatrixXd*> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) {
    m_.emplace_back(MatrixXd::Zero(p->rows(), p->cols()));
    v_.emplace_back(MatrixXd::Zero(p->rows(), p->cols()));
  }
}

void AdamW::step(const std::vector<MatrixXd>& grads) {
  if (grads.size() != params_.size()) throw DimensionError("AdamW: gradient count mismatch");
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const MatrixXd& g = grads[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    MatrixXd mhat = m_[i] / bc1;
    MatrixXd vhat = v_[i] / bc2;
    MatrixXd update =
        mhat.cwiseQuotient((vhat.cwiseSqrt().array() + cfg_.eps).matrix());
    *params_[i] -= cfg_.lr * (update + cfg_.weight_decay * (*params_[i]));
  }
}

RmsProp::RmsProp(std::vector<MatrixXd*> params, Config cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) v_.emplace_back(MatrixXd::Zero(p->rows(), p->cols()));
}

double RmsProp::current_lr() const {
  return cfg_.lr * std::pow(cfg_.decay, static_cast<double>(t_));
}

void RmsProp::step(const std::vector<MatrixXd>& grads) {
  if (grads.size() != params_.size()) throw DimensionError("RmsProp: gradient count mismatch");
  double lr = current_lr();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const MatrixXd& g = grads[i];
    v_[i] = cfg_.alpha * v_[i] + (1.0 - cfg_.alpha) * g.cwiseProduct(g);
    *params_[i] -= lr * g.cwiseQuotient((v_[i].cwiseSqrt().array() + cfg_.eps).matrix());
  }
  ++t_;
}

std::string tensors_to_json(const std::map<std::string, MatrixXd>& tensors) {
  nlohmann::json j;
  for (const auto& [name, M] : tensors) {
    nlohmann::json entry;
    entry["shape"] = {M.rows(), M.cols()};
    auto& data = entry["data"];
    data = nlohmann::json::array();
    for (int r = 0; r < M.rows(); ++r)
      for (int c = 0; c < M.cols(); ++c) data.push_back(M(r, c));
    j[name] = std::move(entry);
  }
  return j.dump();
}

std::map<std::string, MatrixXd> tensors_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("tensor checkpoint: ") + e.what());
  }
  std::map<std::string, MatrixXd> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& entry = it.value();
    if (!entry.contains("shape") || !entry.contains("data"))
      throw ParseError("tensor checkpoint entry '" + it.key() + "' missing shape/data");
    int rows = entry["shape"][0].get<int>();
    int cols = entry["shape"][1].get<int>();
    const auto& data = entry["data"];
    if (static_cast<int>(data.size()) != rows * cols)
      throw ParseError("tensor checkpoint entry '" + it.key() + "' has wrong element count");
    MatrixXd M(rows, cols);
    int idx = 0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) M(r, c) = data[idx++].get<double>();
    out[it.key()] = std::move(M);
  }
  return out;
}

}  // namespace uqmd::ad
