#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uqmd/common.hpp"

namespace uqmd::ad {

using Eigen::MatrixXd;

/// Elementwise functions with first and second derivatives, so graphs that
/// already contain a first derivative stay differentiable.
enum class Act { Tanh, Sigmoid, Softplus, Exp, Log, Square, Sqrt };

double act_value(Act k, double x);
double act_first(Act k, double x);
double act_second(Act k, double x);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices. Values are computed eagerly at
/// node creation; backward() runs one reverse sweep accumulating adjoints.
/// Batches live in columns, vectors are n x 1, scalars 1 x 1.
class Tape {
 public:
  Var leaf(const MatrixXd& value);      // gradient-tracked parameter
  Var constant(const MatrixXd& value);  // no gradient

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_bias(Var x, Var b);  // (n x B) + (n x 1), broadcast over columns
  Var hadamard(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var matmul(Var a, Var b);
  /// (mask .* A) * B; the mask must outlive the tape.
  Var matmul_masked(Var a, Var b, const MatrixXd* mask);
  Var matmul_ta(Var a, Var b);  // A^T * B
  /// W / sigma with sigma = u^T W v; u, v are treated as constants.
  Var spectral_scale(Var w, const Eigen::VectorXd& u, const Eigen::VectorXd& v);
  Var apply(Act k, Var x);
  /// f'(x) as a value; differentiating it uses f''.
  Var apply_prime(Act k, Var x);
  Var rows(Var x, int r0, int n);
  Var reverse_rows(Var x);  // flips the row order
  Var colsum(Var x);  // (n x B) -> (1 x B)
  Var sum(Var x);     // -> 1 x 1
  Var mean(Var x);    // -> 1 x 1
  /// exp(clamp(x, lo, hi)). The derivative is taken as the value itself
  /// (unclamped slope); clamp events increment *counter when given.
  Var clamped_exp(Var x, double lo, double hi, std::uint64_t* counter = nullptr);

  const MatrixXd& value(Var v) const;
  /// Accumulated adjoint of a leaf (or any node) after backward(). Zero
  /// matrix if the node never received gradient.
  MatrixXd grad(Var v) const;

  void backward(Var output);  // scalar outputs, seed 1
  void backward(Var output, const MatrixXd& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    Leaf, Const, Add, Sub, AddBias, Hadamard, Scale, AddConst, MatMul,
    MatMulMasked, MatMulTA, SpectralScale, Apply, ApplyPrime, Rows,
    ReverseRows, ColSum, Sum, Mean, ClampedExp
  };
  struct Node {
    Op op;
    int a = -1, b = -1;
    MatrixXd value;
    MatrixXd adj;
    bool has_adj = false;
    bool needs_grad = false;
    double c0 = 0, c1 = 0;
    int r0 = 0, nr = 0;
    Act act = Act::Tanh;
    const MatrixXd* mask = nullptr;
    Eigen::VectorXd u, v;
    double sigma = 1.0;
    std::uint64_t* counter = nullptr;
  };
  std::vector<Node> nodes_;

  Var push(Node n);
  void accumulate(int id, const MatrixXd& g);
  const Node& at(Var v) const;
};

/// Xavier/Glorot uniform in +-sqrt(6 / (fan_in + fan_out)).
MatrixXd xavier_uniform(int rows, int cols, Rng& rng);

/// One dense layer; b is rows x 1. Spectral normalization state is carried
/// here when the layer is constrained.
struct DenseLayer {
  MatrixXd W;
  MatrixXd b;
  bool spec_norm = false;
  Eigen::VectorXd u, v;
  double sigma = 1.0;

  /// Power-iteration update of (u, v, sigma) on the raw W.
  void power_iterate(int iters);
  MatrixXd effective_weight() const { return spec_norm ? MatrixXd(W / guarded_sigma()) : W; }
  double guarded_sigma() const { return std::max(sigma, 1e-12); }
};

/// Fully connected scalar-output network with smooth activations. Hidden
/// layers optionally carry spectral normalization.
class DenseNetwork {
 public:
  DenseNetwork() = default;
  DenseNetwork(int n_in, const std::vector<int>& hidden, Act hidden_act, bool spectral_hidden,
               Rng& init_rng);

  int n_in() const { return n_in_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  Act activation() const { return act_; }

  /// One power iteration per constrained layer (call once per training step).
  void power_iterate(int iters = 1);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& X) const;         // 1 x B
  Eigen::MatrixXd input_gradient(const Eigen::MatrixXd& X) const;  // n_in x B

  struct TapeRefs {
    std::vector<Var> Ws, bs;   // leaves, in layer order
    std::vector<Var> eff;      // spectrally scaled weights actually used
  };
  struct ForwardVars {
    Var out;              // 1 x B
    std::vector<Var> zs;  // pre-activations per hidden layer
  };
  TapeRefs register_params(Tape& tape) const;
  ForwardVars forward_on_tape(Tape& tape, const TapeRefs& refs, Var input) const;
  /// Explicit input-gradient graph of a previous forward pass; second-order
  /// gradients come from differentiating this graph.
  Var input_gradient_on_tape(Tape& tape, const TapeRefs& refs, const ForwardVars& fwd) const;

  std::vector<MatrixXd*> parameters();
  std::vector<MatrixXd> gradients(const Tape& tape, const TapeRefs& refs) const;

 private:
  int n_in_ = 0;
  Act act_ = Act::Softplus;
  std::vector<DenseLayer> layers_;
};

/// Masked autoregressive network producing location l and raw scale s for
/// n_in inputs (output size 2 n_in). Output-layer masks use the strict
/// degree inequality so output slot i never sees input i.
class Made {
 public:
  Made() = default;
  Made(int n_in, int n_hidden_layers, int hidden_width, Rng& init_rng);

  int n_in() const { return n_in_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<MatrixXd>& masks() const { return masks_; }

  /// (location, raw scale), each n_in x B.
  std::pair<MatrixXd, MatrixXd> forward(const MatrixXd& Z) const;

  struct TapeRefs {
    std::vector<Var> Ws, bs;
  };
  TapeRefs register_params(Tape& tape) const;
  std::pair<Var, Var> forward_on_tape(Tape& tape, const TapeRefs& refs, Var input) const;

  std::vector<MatrixXd*> parameters();
  std::vector<MatrixXd> gradients(const Tape& tape, const TapeRefs& refs) const;

 private:
  int n_in_ = 0;
  std::vector<DenseLayer> layers_;
  std::vector<MatrixXd> masks_;
};

/// AdamW with decoupled weight decay; moments per bound parameter.
class AdamW {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };
  AdamW(std::vector<MatrixXd*> params, Config cfg);
  void step(const std::vector<MatrixXd>& grads);
  long steps() const { return t_; }

 private:
  std::vector<MatrixXd*> params_;
  std::vector<MatrixXd> m_, v_;
  Config cfg_;
  long t_ = 0;
};

/// RMSprop with exponential learning-rate decay: after k steps the rate is
/// lr0 * decay^k.
class RmsProp {
 public:
  struct Config {
    double lr = 5e-4;
    double alpha = 0.99;
    double eps = 1e-8;
    double decay = 0.9999;
  };
  RmsProp(std::vector<MatrixXd*> params, Config cfg);
  void step(const std::vector<MatrixXd>& grads);
  double current_lr() const;
  long steps() const { return t_; }

 private:
  std::vector<MatrixXd*> params_;
  std::vector<MatrixXd> v_;
  Config cfg_;
  long t_ = 0;
};

/// Named-tensor checkpoints, round-trip exact through JSON.
std::string tensors_to_json(const std::map<std::string, MatrixXd>& tensors);
std::map<std::string, MatrixXd> tensors_from_json(const std::string& text);

}  // namespace uqmd::ad
