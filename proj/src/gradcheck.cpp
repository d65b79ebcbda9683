#include "lungseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "lungseg/blocks.hpp"
#include "lungseg/loss_metrics.hpp"
#include "lungseg/networks.hpp"

namespace lungseg {

Tensor5<double> finite_diff_grad(const ScalarFn& f, const Tensor5<double>& x, double h) {
  if (!(h > 0.0)) throw ValidationError("finite_diff_grad: step must be positive");
  Tensor5<double> probe = x;
  Tensor5<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ValidationError("finite_diff_grad: non-finite function value at element " + std::to_string(i));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradReport compare_gradients(const std::string& name, const Tensor5<double>& analytic,
                             const Tensor5<double>& numeric, double tolerance, double abs_floor,
                             const std::vector<std::int64_t>& indices) {
  if (!analytic.same_shape(numeric))
    throw ShapeError("compare_gradients(" + name + "): analytic " + shape_to_string(analytic.shape()) +
                     " vs numeric " + shape_to_string(numeric.shape()));
  GradReport r;
  r.name = name;
  r.tolerance = tolerance;
  r.abs_floor = abs_floor;
  bool all_ok = true;
  auto visit = [&](std::int64_t i) {
    const double a = analytic[static_cast<std::size_t>(i)], n = numeric[static_cast<std::size_t>(i)];
    const double abs_err = std::abs(a - n);
    const double rel = std::isfinite(abs_err) ? relative_error(a, n) : std::numeric_limits<double>::infinity();
    if (r.worst_index < 0 || rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
    }
    r.max_abs_err = std::max(r.max_abs_err, std::isfinite(abs_err) ? abs_err : std::numeric_limits<double>::infinity());
    if (!(abs_err <= abs_floor)) r.max_rel_err_above_floor = std::max(r.max_rel_err_above_floor, rel);
    all_ok = all_ok && (rel <= tolerance || abs_err <= abs_floor);
    ++r.checked;
  };
  if (indices.empty()) {
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(analytic.size()); ++i) visit(i);
  } else {
    for (auto i : indices) visit(i);
  }
  r.pass = r.checked > 0 && all_ok;
  return r;
}

std::vector<GradReport> run_gradcheck(GradProblem& problem, std::uint64_t seed) {
  const auto& inputs = problem.inputs;
  const std::vector<Tensor5<double>> analytic = problem.analytic();
  if (analytic.size() != inputs.size()) throw ValidationError("gradcheck: analytic gradient count mismatch");

  // Coordinates to probe for each input.
  std::vector<std::vector<std::int64_t>> picks(inputs.size());
  if (problem.sample_budget <= 0) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      picks[k].resize(inputs[k].value->size());
      for (std::size_t i = 0; i < picks[k].size(); ++i) picks[k][i] = static_cast<std::int64_t>(i);
    }
  } else {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::set<std::int64_t>> chosen(inputs.size());
    std::vector<double> weights;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto n = static_cast<std::int64_t>(inputs[k].value->size());
      chosen[k].insert(std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng));
      weights.push_back(static_cast<double>(n));
    }
    std::discrete_distribution<std::size_t> which(weights.begin(), weights.end());
    std::int64_t total = static_cast<std::int64_t>(inputs.size());
    std::int64_t attempts = 0;
    while (total < problem.sample_budget && attempts++ < 100 * problem.sample_budget) {
      const std::size_t k = which(rng);
      const auto n = static_cast<std::int64_t>(inputs[k].value->size());
      if (chosen[k].insert(std::uniform_int_distribution<std::int64_t>(0, n - 1)(rng)).second) ++total;
    }
    for (std::size_t k = 0; k < inputs.size(); ++k) picks[k].assign(chosen[k].begin(), chosen[k].end());
  }

  struct Probe {
    double plus, minus, h;
    double central() const { return (plus - minus) / (2.0 * h); }
  };
  auto probe = [&](Tensor5<double>& t, std::size_t i, double h) {
    const double x0 = t[i];
    t[i] = x0 + h;
    const double fp = problem.loss();
    t[i] = x0 - h;
    const double fm = problem.loss();
    t[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ValidationError("gradcheck: non-finite loss while probing element " + std::to_string(i));
    return Probe{fp, fm, h};
  };
  double base_loss = std::numeric_limits<double>::quiet_NaN();

  std::vector<GradReport> reports;
  Rng replace_rng(seed ^ 0x5851f42d4c957f2dULL);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor5<double>& t = *inputs[k].value;
    const Tensor5<double>& a = analytic[k];
    Tensor5<double> numeric(t.shape());
    std::int64_t refined = 0, unresolved = 0;
    std::vector<std::int64_t> resolved;
    std::set<std::int64_t> tried(picks[k].begin(), picks[k].end());
    std::vector<std::int64_t> queue(picks[k].rbegin(), picks[k].rend());
    const auto n_elems = static_cast<std::int64_t>(t.size());
    const std::size_t wanted = picks[k].size();
    const std::size_t max_tries = 10 * wanted;
    while (!queue.empty() && resolved.size() < wanted) {
      const std::int64_t idx = queue.back();
      queue.pop_back();
      const auto i = static_cast<std::size_t>(idx);
      auto close = [&](double x, double y) {
        return relative_error(x, y) <= problem.tolerance || std::abs(x - y) <= problem.abs_floor;
      };
      double n = probe(t, i, problem.step).central();
      if (!close(a[i], n)) {
        const Probe fine = probe(t, i, problem.step / 10.0);
        ++refined;
        if (std::isnan(base_loss)) base_loss = problem.loss();
        const double fwd = (fine.plus - base_loss) / fine.h;
        const double bwd = (base_loss - fine.minus) / fine.h;
        if (!close(a[i], fine.central()) && (!close(n, fine.central()) || !close(fwd, bwd))) {
          // Either the two steps disagree or the one-sided slopes do: a kink
          // sits at or near this coordinate and no estimate is trustworthy.
          ++unresolved;
          if (problem.sample_budget > 0 && tried.size() < std::min<std::size_t>(max_tries, t.size())) {
            std::int64_t next;
            do {
              next = std::uniform_int_distribution<std::int64_t>(0, n_elems - 1)(replace_rng);
            } while (!tried.insert(next).second);
            queue.push_back(next);
          }
          continue;
        }
        n = fine.central();
      }
      numeric[i] = n;
      resolved.push_back(idx);
    }
    std::sort(resolved.begin(), resolved.end());
    GradReport r;
    if (resolved.empty()) {
      r.name = inputs[k].name;
      r.tolerance = problem.tolerance;
      r.abs_floor = problem.abs_floor;
      r.pass = false;
    } else {
      r = compare_gradients(inputs[k].name, a, numeric, problem.tolerance, problem.abs_floor, resolved);
    }
    std::vector<std::string> notes;
    if (!problem.note.empty()) notes.push_back(problem.note);
    if (refined > 0) notes.push_back("re-probed " + std::to_string(refined) + " coordinate(s) with step/10");
    if (unresolved > 0)
      notes.push_back("excluded " + std::to_string(unresolved) +
                      " coordinate(s) whose step and step/10 estimates disagree");
    if (resolved.empty()) notes.push_back("no coordinate could be resolved");
    for (std::size_t j = 0; j < notes.size(); ++j) r.note += (j ? "; " : "") + notes[j];
    reports.push_back(std::move(r));
  }
  return reports;
}

// ----------------------------------------------------------------- targets

namespace {

const std::vector<std::string> kBlockTargets{"residual_block", "attention_gate", "sasm", "conv_block"};
const std::vector<std::string> kNetworkTargets{"attention_resunet", "efficient_sasm_unet"};
const std::vector<std::string> kLossTargets{"bce_loss", "dice_loss", "combined_loss"};

using T5 = Tensor5<double>;

T5 randn(const Shape5& s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  T5 t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

T5 uniform(const Shape5& s, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  T5 t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Moves every |x| < margin out to +-margin; returns how many moved.
std::int64_t nudge_from_zero(T5& x, double margin) {
  std::int64_t moved = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::abs(x[i]) < margin) {
      x[i] = x[i] < 0.0 ? -margin : margin;
      ++moved;
    }
  return moved;
}

/// BN affine and bias terms start at 1 / 0; spread them so nothing cancels by accident.
void spread_params(ParamList<double>& params, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& p : params) {
    if (!p.trainable()) continue;
    if (p.role == "bn_gamma")
      for (auto& v : p.value->storage()) v = 1.0 + 0.2 * n(rng);
    else if (p.role == "bn_beta" || p.role == "bias")
      for (auto& v : p.value->storage()) v = 0.1 * n(rng);
  }
}

void add_params(GradProblem& pb, ParamList<double>& params) {
  for (auto& p : params)
    if (p.trainable()) pb.inputs.push_back({p.name, p.value});
}

std::vector<T5> grads_of(const ParamList<double>& params) {
  std::vector<T5> out;
  for (const auto& p : params)
    if (p.trainable()) out.push_back(*p.grad);
  return out;
}

Matrix<double> as_matrix(const T5& t) {
  Matrix<double> m(static_cast<std::size_t>(t.dim(3)), static_cast<std::size_t>(t.dim(4)));
  m.data = t.storage();
  return m;
}

TokenTensor<double> as_tokens(const T5& t, const TokenTensor<double>& like) {
  TokenTensor<double> k = like;
  k.data = t.storage();
  return k;
}

T5 tokens_as_tensor(const TokenTensor<double>& k) {
  return T5({1, 1, k.batch * k.windows, k.tokens, k.channels}, k.data);
}

GradProblem op_problem(const std::string& op, Rng& rng) {
  GradProblem pb;
  struct State {
    std::map<std::string, T5> t;
    LayerParams<double> conv;
    BatchNormState<double> eval_state;
    TokenTensor<double> token_like;
    std::uint64_t drop_seed = 0;
  };
  auto st = std::make_shared<State>();
  pb.owner = st;
  auto& t = st->t;
  auto reg = [&](const std::string& name, T5 v) {
    t[name] = std::move(v);
    pb.inputs.push_back({name, &t[name]});
  };

  if (op == "conv3d" || op == "tconv3d") {
    ConvSpec s;
    s.in_channels = 2;
    s.out_channels = 3;
    const bool tr = op == "tconv3d";
    if (tr) {
      s.kernel = {3, 2, 2};
      s.stride = {2, 2, 1};
      s.padding = {1, 0, 0};
      st->conv = make_tconv_params<double>(s, rng);
    } else {
      s.kernel = {3, 2, 3};
      s.stride = {1, 2, 1};
      s.dilation = {2, 1, 1};
      s.padding = {2, 0, 1};
      st->conv = make_conv_params<double>(s, rng);
    }
    reg("x", randn({2, 2, 4, 5, 4}, rng));
    st->conv.bias = randn(st->conv.bias.shape(), rng, 0.1);
    pb.inputs.push_back({"weight", &st->conv.weight});
    pb.inputs.push_back({"bias", &st->conv.bias});
    const auto fwd = [st, tr] { return tr ? tconv3d(st->t["x"], st->conv) : conv3d(st->t["x"], st->conv); };
    t["r"] = randn(fwd().shape(), rng);
    pb.loss = [st, fwd] { return tensor_dot(fwd(), st->t["r"]); };
    pb.analytic = [st, tr] {
      auto g = tr ? tconv3d_backward(st->t["x"], st->conv, st->t["r"]) : conv3d_backward(st->t["x"], st->conv, st->t["r"]);
      return std::vector<T5>{g.input, g.weight, g.bias};
    };
  } else if (op == "maxpool3d") {
    const Shape5 s{1, 2, 4, 4, 6};
    std::vector<double> vals(static_cast<std::size_t>(shape_numel(s)));
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * static_cast<double>(i);
    std::shuffle(vals.begin(), vals.end(), rng);
    reg("x", T5(s, vals));
    t["r"] = randn({1, 2, 2, 2, 3}, rng);
    pb.note = "inputs spaced 0.1 apart so no window has a tie";
    pb.loss = [st] { return tensor_dot(maxpool3d(st->t["x"], WindowSpec{2, 2, 2}).output, st->t["r"]); };
    pb.analytic = [st] {
      const auto p = maxpool3d(st->t["x"], WindowSpec{2, 2, 2});
      return std::vector<T5>{maxpool3d_backward(st->t["x"].shape(), p.argmax, st->t["r"])};
    };
  } else if (op == "batchnorm3d") {
    reg("x", randn({2, 3, 3, 4, 2}, rng, 2.0));
    reg("gamma", uniform({3, 1, 1, 1, 1}, rng, 0.5, 1.5));
    reg("beta", randn({3, 1, 1, 1, 1}, rng, 0.3));
    st->eval_state = BatchNormState<double>::make(3);
    st->eval_state.running_mean = randn({3, 1, 1, 1, 1}, rng, 0.5);
    st->eval_state.running_var = uniform({3, 1, 1, 1, 1}, rng, 0.5, 2.0);
    t["r_train"] = randn(t["x"].shape(), rng);
    t["r_eval"] = randn(t["x"].shape(), rng);
    pb.note = "sum of train-mode and eval-mode projections";
    pb.loss = [st] {
      auto& m = st->t;
      auto scratch = BatchNormState<double>::make(3);
      auto es = st->eval_state;
      return tensor_dot(batchnorm3d(m["x"], m["gamma"], m["beta"], scratch, Mode::train), m["r_train"]) +
             tensor_dot(batchnorm3d(m["x"], m["gamma"], m["beta"], es, Mode::eval), m["r_eval"]);
    };
    pb.analytic = [st] {
      auto& m = st->t;
      auto scratch = BatchNormState<double>::make(3);
      auto es = st->eval_state;
      BatchNormCache<double> ct, ce;
      batchnorm3d(m["x"], m["gamma"], m["beta"], scratch, Mode::train, &ct);
      batchnorm3d(m["x"], m["gamma"], m["beta"], es, Mode::eval, &ce);
      auto gt = batchnorm3d_backward(ct, m["gamma"], m["r_train"]);
      auto ge = batchnorm3d_backward(ce, m["gamma"], m["r_eval"]);
      gt.input += ge.input;
      gt.gamma += ge.gamma;
      gt.beta += ge.beta;
      return std::vector<T5>{gt.input, gt.gamma, gt.beta};
    };
  } else if (op == "relu" || op == "sigmoid") {
    const Activation kind = op == "relu" ? Activation::relu : Activation::sigmoid;
    T5 x = randn({1, 2, 3, 4, 5}, rng, 2.0);
    if (kind == Activation::relu)
      pb.note = "nudged " + std::to_string(nudge_from_zero(x, 0.05)) + " input(s) to |x| >= 0.05";
    reg("x", std::move(x));
    t["r"] = randn(t["x"].shape(), rng);
    pb.loss = [st, kind] { return tensor_dot(activation(st->t["x"], kind), st->t["r"]); };
    pb.analytic = [st, kind] {
      const auto y = activation(st->t["x"], kind);
      return std::vector<T5>{activation_backward(kind, st->t["x"], y, st->t["r"])};
    };
  } else if (op == "softmax") {
    reg("scores", randn({1, 1, 1, 5, 7}, rng, 2.0));
    t["r"] = randn(t["scores"].shape(), rng);
    pb.loss = [st] {
      const auto y = softmax_lastdim(as_matrix(st->t["scores"]));
      return tensor_dot(T5(st->t["r"].shape(), y.data), st->t["r"]);
    };
    pb.analytic = [st] {
      const auto y = softmax_lastdim(as_matrix(st->t["scores"]));
      const auto g = softmax_lastdim_backward(y, as_matrix(st->t["r"]));
      return std::vector<T5>{T5(st->t["r"].shape(), g.data)};
    };
  } else if (op == "dropout") {
    reg("x", randn({1, 3, 3, 4, 4}, rng));
    t["r"] = randn(t["x"].shape(), rng);
    st->drop_seed = rng();
    pb.note = "rate 0.4, mask fixed by reseeding";
    pb.loss = [st] {
      Rng r(st->drop_seed);
      return tensor_dot(dropout(st->t["x"], 0.4, Mode::train, r).output, st->t["r"]);
    };
    pb.analytic = [st] {
      Rng r(st->drop_seed);
      const auto d = dropout(st->t["x"], 0.4, Mode::train, r);
      return std::vector<T5>{dropout_backward(d.mask, st->t["r"])};
    };
  } else if (op == "concat_channels") {
    reg("a", randn({2, 2, 2, 3, 3}, rng));
    reg("b", randn({2, 3, 2, 3, 3}, rng));
    t["r"] = randn({2, 5, 2, 3, 3}, rng);
    pb.loss = [st] { return tensor_dot(concat_channels(st->t["a"], st->t["b"]), st->t["r"]); };
    pb.analytic = [st] {
      auto [ga, gb] = split_channels(st->t["r"], 2);
      return std::vector<T5>{ga, gb};
    };
  } else if (op == "center_crop3d") {
    reg("x", randn({1, 2, 7, 6, 5}, rng));
    t["r"] = randn({1, 2, 4, 3, 5}, rng);
    pb.loss = [st] { return tensor_dot(center_crop3d(st->t["x"], Index3{4, 3, 5}), st->t["r"]); };
    pb.analytic = [st] { return std::vector<T5>{center_crop3d_backward(st->t["r"], st->t["x"].shape())}; };
  } else if (op == "pad3d") {
    reg("x", randn({1, 2, 3, 4, 5}, rng));
    t["r"] = randn({1, 2, 6, 5, 8}, rng);
    pb.loss = [st] { return tensor_dot(pad3d(st->t["x"], Index3{6, 5, 8}), st->t["r"]); };
    pb.analytic = [st] { return std::vector<T5>{pad3d_backward(st->t["r"], Index3{3, 4, 5})}; };
  } else if (op == "unfold_windows") {
    const WindowSpec w{2, 2, 3};
    reg("x", randn({1, 3, 4, 4, 6}, rng));
    st->token_like = unfold_windows(st->t["x"], w);
    t["r"] = randn(tokens_as_tensor(st->token_like).shape(), rng);
    pb.loss = [st, w] { return tensor_dot(tokens_as_tensor(unfold_windows(st->t["x"], w)), st->t["r"]); };
    pb.analytic = [st, w] {
      return std::vector<T5>{fold_windows(as_tokens(st->t["r"], st->token_like), w, Index3{4, 4, 6})};
    };
  } else if (op == "fold_windows") {
    const WindowSpec w{2, 1, 2};
    const Index3 sp{4, 3, 4};
    st->token_like = unfold_windows(T5({1, 2, sp.d, sp.h, sp.w}), w);
    reg("tokens", randn(tokens_as_tensor(st->token_like).shape(), rng));
    t["r"] = randn({1, 2, sp.d, sp.h, sp.w}, rng);
    pb.loss = [st, w, sp] { return tensor_dot(fold_windows(as_tokens(st->t["tokens"], st->token_like), w, sp), st->t["r"]); };
    pb.analytic = [st, w] { return std::vector<T5>{tokens_as_tensor(unfold_windows(st->t["r"], w))}; };
  } else {
    throw ValidationError("unknown gradcheck target \"" + op + "\"");
  }
  return pb;
}

GradProblem loss_problem(const std::string& which, Rng& rng) {
  GradProblem pb;
  struct State {
    T5 p, m;
  };
  auto st = std::make_shared<State>();
  pb.owner = st;
  st->p = uniform({1, 1, 3, 4, 5}, rng, 0.05, 0.95);
  st->m = T5(st->p.shape());
  std::bernoulli_distribution coin(0.4);
  for (std::size_t i = 0; i < st->m.size(); ++i) st->m[i] = coin(rng) ? 1.0 : 0.0;
  pb.inputs.push_back({"p", &st->p});
  pb.step = 1e-6;
  if (which == "bce_loss") {
    pb.loss = [st] { return bce_loss(st->p, st->m); };
    pb.analytic = [st] { return std::vector<T5>{bce_loss_grad(st->p, st->m)}; };
  } else if (which == "dice_loss") {
    pb.loss = [st] { return dice_loss(st->p, st->m); };
    pb.analytic = [st] { return std::vector<T5>{dice_loss_grad(st->p, st->m)}; };
  } else {
    pb.loss = [st] { return combined_loss(st->p, st->m).total; };
    pb.analytic = [st] { return std::vector<T5>{combined_loss_grad(st->p, st->m)}; };
  }
  return pb;
}

GradProblem block_problem(const std::string& which, Rng& rng) {
  GradProblem pb;
  struct State {
    ResidualBlock<double> res_proj, res_ident;
    AttentionGate<double> gate;
    EfficientSASM<double> sasm;
    ConvBlock<double> conv_block;
    ParamList<double> params;
    std::map<std::string, T5> t;
    std::uint64_t drop_seed = 0;
  };
  auto st = std::make_shared<State>();
  pb.owner = st;
  auto& t = st->t;
  pb.step = 1e-5;

  if (which == "residual_block") {
    st->res_proj = ResidualBlock<double>(2, 3, 2, rng);
    st->res_ident = ResidualBlock<double>(3, 3, 1, rng);
    st->res_proj.collect(st->params, "proj");
    st->res_ident.collect(st->params, "ident");
    t["x1"] = randn({1, 2, 6, 6, 5}, rng);
    t["x2"] = randn({1, 3, 4, 5, 4}, rng);
    t["r1"] = randn({1, 3, 3, 3, 3}, rng);
    t["r2"] = randn({1, 3, 4, 5, 4}, rng);
    pb.inputs.push_back({"proj.x", &t["x1"]});
    pb.inputs.push_back({"ident.x", &t["x2"]});
    pb.note = "stride-2 projection block and stride-1 identity block";
    pb.loss = [st] {
      auto& m = st->t;
      return tensor_dot(st->res_proj.forward(m["x1"], Mode::train), m["r1"]) +
             tensor_dot(st->res_ident.forward(m["x2"], Mode::train), m["r2"]);
    };
    pb.analytic = [st] {
      auto& m = st->t;
      zero_grads(st->params);
      st->res_proj.forward(m["x1"], Mode::train);
      st->res_ident.forward(m["x2"], Mode::train);
      std::vector<T5> g{st->res_proj.backward(m["r1"]), st->res_ident.backward(m["r2"])};
      for (auto& p : grads_of(st->params)) g.push_back(std::move(p));
      return g;
    };
  } else if (which == "attention_gate") {
    st->gate = AttentionGate<double>(4, 3, rng);
    st->gate.collect(st->params, "gate");
    t["x"] = randn({1, 4, 6, 6, 4}, rng);
    t["g"] = randn({1, 3, 3, 3, 2}, rng);
    t["r"] = randn(t["x"].shape(), rng);
    pb.inputs.push_back({"x", &t["x"]});
    pb.inputs.push_back({"g", &t["g"]});
    pb.loss = [st] { return tensor_dot(st->gate.forward(st->t["x"], st->t["g"]), st->t["r"]); };
    pb.analytic = [st] {
      zero_grads(st->params);
      st->gate.forward(st->t["x"], st->t["g"]);
      auto [gx, gg] = st->gate.backward(st->t["r"]);
      std::vector<T5> g{gx, gg};
      for (auto& p : grads_of(st->params)) g.push_back(std::move(p));
      return g;
    };
  } else if (which == "sasm") {
    st->sasm = EfficientSASM<double>(4, WindowSpec{2, 2, 2}, rng);
    st->sasm.gamma.fill(0.7);
    st->sasm.collect(st->params, "sasm");
    t["x"] = randn({1, 4, 4, 4, 2}, rng);
    t["r"] = randn(t["x"].shape(), rng);
    pb.inputs.push_back({"x", &t["x"]});
    pb.note = "gamma set to 0.7";
    pb.loss = [st] { return tensor_dot(st->sasm.forward(st->t["x"]), st->t["r"]); };
    pb.analytic = [st] {
      zero_grads(st->params);
      st->sasm.forward(st->t["x"]);
      std::vector<T5> g{st->sasm.backward(st->t["r"])};
      for (auto& p : grads_of(st->params)) g.push_back(std::move(p));
      return g;
    };
  } else if (which == "conv_block") {
    st->conv_block = ConvBlock<double>(2, 3, 0.25, rng);
    st->conv_block.collect(st->params, "block");
    st->drop_seed = rng();
    t["x"] = randn({1, 2, 5, 4, 5}, rng);
    t["r"] = randn({1, 3, 5, 4, 5}, rng);
    pb.inputs.push_back({"x", &t["x"]});
    pb.note = "dropout rate 0.25, masks fixed by reseeding";
    pb.loss = [st] {
      Rng r(st->drop_seed);
      return tensor_dot(st->conv_block.forward(st->t["x"], Mode::train, r), st->t["r"]);
    };
    pb.analytic = [st] {
      zero_grads(st->params);
      Rng r(st->drop_seed);
      st->conv_block.forward(st->t["x"], Mode::train, r);
      std::vector<T5> g{st->conv_block.backward(st->t["r"])};
      for (auto& p : grads_of(st->params)) g.push_back(std::move(p));
      return g;
    };
  }
  spread_params(st->params, rng);
  add_params(pb, st->params);
  return pb;
}

GradProblem network_problem(const std::string& which, Rng& rng) {
  GradProblem pb;
  struct State {
    std::unique_ptr<SegmentationNet<double>> net;
    ParamList<double> params;
    T5 x, m;
    std::uint64_t drop_seed = 0;
  };
  auto st = std::make_shared<State>();
  pb.owner = st;
  NetworkConfig c;
  if (which == "attention_resunet") {
    c = NetworkConfig::lung_default();
    c.input_spatial = {27, 30, 32};
  } else {
    c = NetworkConfig::nodule_default();
    c.input_spatial = {32, 32, 32};
    c.sasm_window = {2, 2, 2};
  }
  c.stage_channels = {2, 4, 8, 16};
  st->net = make_network<double>(c, rng);
  st->params = st->net->parameters();
  spread_params(st->params, rng);
  if (auto* sn = dynamic_cast<EfficientSasmUNet<double>*>(st->net.get())) sn->sasm()->gamma.fill(0.5);
  st->x = randn({1, c.in_channels, c.input_spatial.d, c.input_spatial.h, c.input_spatial.w}, rng);
  st->m = T5(st->x.shape());
  std::bernoulli_distribution coin(0.3);
  for (std::size_t i = 0; i < st->m.size(); ++i) st->m[i] = coin(rng) ? 1.0 : 0.0;
  st->drop_seed = rng();
  pb.inputs.push_back({"input", &st->x});
  add_params(pb, st->params);
  // Tens of thousands of ReLU and max-pool kinks sit inside the net; a step
  // of 1e-4 routinely straddles some of them.
  pb.step = 1e-5;
  pb.tolerance = 1e-3;
  pb.sample_budget = 200;
  pb.note = "micro widths [2,4,8,16], input " + index3_to_string(c.input_spatial) + ", combined loss";
  if (c.kind == NetKind::nodule) pb.note += ", SASM gamma 0.5, dropout masks fixed by reseeding";
  pb.loss = [st] {
    Rng r(st->drop_seed);
    return combined_loss(st->net->forward(st->x, Mode::train, r), st->m).total;
  };
  pb.analytic = [st] {
    zero_grads(st->params);
    Rng r(st->drop_seed);
    const auto p = st->net->forward(st->x, Mode::train, r);
    std::vector<T5> g{st->net->backward(combined_loss_grad(p, st->m))};
    for (auto& gp : grads_of(st->params)) g.push_back(std::move(gp));
    return g;
  };
  return pb;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

const std::vector<std::string>& gradcheck_targets() {
  static const std::vector<std::string> all = [] {
    std::vector<std::string> v = differentiable_ops();
    v.insert(v.end(), kBlockTargets.begin(), kBlockTargets.end());
    v.insert(v.end(), kNetworkTargets.begin(), kNetworkTargets.end());
    v.insert(v.end(), kLossTargets.begin(), kLossTargets.end());
    return v;
  }();
  return all;
}

GradProblem make_grad_problem(const std::string& target, std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  GradProblem pb;
  if (contains(kBlockTargets, target))
    pb = block_problem(target, rng);
  else if (contains(kNetworkTargets, target))
    pb = network_problem(target, rng);
  else if (contains(kLossTargets, target))
    pb = loss_problem(target, rng);
  else if (contains(differentiable_ops(), target))
    pb = op_problem(target, rng);
  else
    throw ValidationError("unknown gradcheck target \"" + target + "\"");
  if (tolerance >= 0.0) pb.tolerance = tolerance;
  return pb;
}

std::vector<GradReport> check_gradients(const std::string& target, std::uint64_t seed, double tolerance) {
  GradProblem pb = make_grad_problem(target, seed, tolerance);
  auto reports = run_gradcheck(pb, seed);
  for (auto& r : reports) r.name = target + "." + r.name;
  return reports;
}

nlohmann::json to_json(const GradReport& r) {
  nlohmann::json j{{"op", r.name},
                   {"max_rel_err", r.max_rel_err},
                   {"max_rel_err_above_floor", r.max_rel_err_above_floor},
                   {"max_abs_err", r.max_abs_err},
                   {"worst_index", r.worst_index},
                   {"pass", r.pass},
                   {"checked", r.checked},
                   {"tolerance", r.tolerance},
                   {"abs_floor", r.abs_floor}};
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

nlohmann::json to_json(const std::vector<GradReport>& reports) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : reports) a.push_back(to_json(r));
  return a;
}

}  // namespace lungseg
