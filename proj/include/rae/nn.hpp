#pragma once

// Parameter bookkeeping and the transformer building blocks. Parameters live
// in a ParamStore as named tensors; each forward pass leases them onto a
// tape through a Session, so one Session caching a name guarantees that all
// uses of that parameter share a node and gradients accumulate.

#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rae/ops.hpp"

namespace rae {

inline bool is_buffer_name(const std::string& name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ContractError("param '" + name + "' already registered");
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(init));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
    return values_[it->second];
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown param '" + name + "'");
    return values_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  // Order-insensitive content digest; used by freezing/teacher-isolation
  // tests.
  std::uint64_t checksum() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      for (char c : names_[i]) h = h * 1099511628211ull + static_cast<unsigned char>(c);
      for (std::size_t j = 0; j < values_[i].size(); ++j) {
        std::uint64_t bits;
        const double d = static_cast<double>(values_[i][j]);
        static_assert(sizeof(bits) == sizeof(d));
        std::memcpy(&bits, &d, sizeof(bits));
        h = h * 1099511628211ull + bits;
      }
    }
    return h;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor<T>> values_;
};

// One forward pass over a tape: leases parameters on first use and caches
// the lease. `trainable` decides per name whether the leased leaf requires
// gradients; a no-grad session (teacher passes, eval) records nothing.
template <class T>
class Session {
 public:
  using TrainablePred = std::function<bool(const std::string&)>;

  Session(Tape<T>& tape, ParamStore<T>& store, TrainablePred trainable, bool training = false,
          Rng* rng = nullptr)
      : tape_(tape), store_(store), trainable_(std::move(trainable)), training_(training), rng_(rng) {}

  static TrainablePred all() {
    return [](const std::string&) { return true; };
  }
  static TrainablePred none() {
    return [](const std::string&) { return false; };
  }
  static TrainablePred prefix(std::string p) {
    return [p = std::move(p)](const std::string& name) { return name.rfind(p, 0) == 0; };
  }

  Var<T> param(const std::string& name) {
    auto it = leased_.find(name);
    if (it != leased_.end()) return it->second;
    const bool req = !is_buffer_name(name) && trainable_(name);
    Var<T> v = tape_.leaf(store_.at(name), req);
    leased_.emplace(name, v);
    return v;
  }

  Var<T> input(Tensor<T> v) { return tape_.constant(std::move(v)); }

  Tape<T>& tape() { return tape_; }
  ParamStore<T>& store() { return store_; }
  bool training() const { return training_; }
  Rng& rng() {
    if (!rng_) throw ContractError("session: rng required (dropout in training mode)");
    return *rng_;
  }

  // Gradients of every leased trainable parameter, post-backward.
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, var] : leased_)
      if (var.requires_grad()) out.emplace(name, var.grad());
    return out;
  }

  std::vector<std::string> touched_trainable() const {
    std::vector<std::string> out;
    for (const auto& [name, var] : leased_)
      if (var.requires_grad()) out.push_back(name);
    return out;
  }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  TrainablePred trainable_;
  bool training_;
  Rng* rng_;
  std::map<std::string, Var<T>> leased_;
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

inline constexpr double kInitStd = 0.02;  // token initializations (mask query)

// Xavier-normal weights, zero biases.
template <class T>
void init_linear(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t in,
                 std::size_t out) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  store.add(prefix + ".w", Tensor<T>::randn({in, out}, rng, stddev));
  store.add(prefix + ".b", Tensor<T>({out}));
}

template <class T>
void init_layer_norm(ParamStore<T>& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".g", Tensor<T>::ones({width}));
  store.add(prefix + ".b", Tensor<T>({width}));
}

template <class T>
void init_batch_norm(ParamStore<T>& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".g", Tensor<T>::ones({width}));
  store.add(prefix + ".b", Tensor<T>({width}));
  store.add(prefix + ".running_mean", Tensor<T>({width}));
  store.add(prefix + ".running_var", Tensor<T>::ones({width}));
}

template <class T>
void init_attention(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t dim) {
  for (const char* part : {"q", "k", "v", "o"}) init_linear(store, rng, prefix + "." + part, dim, dim);
}

template <class T>
void init_feed_forward(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t dim,
                       std::size_t expansion = 4) {
  init_linear(store, rng, prefix + ".l0", dim, dim * expansion);
  init_linear(store, rng, prefix + ".l1", dim * expansion, dim);
}

template <class T>
void init_encoder_block(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t dim) {
  init_layer_norm(store, prefix + ".ln1", dim);
  init_attention(store, rng, prefix + ".attn", dim);
  init_layer_norm(store, prefix + ".ln2", dim);
  init_feed_forward(store, rng, prefix + ".ffn", dim);
}

template <class T>
void init_cross_block(ParamStore<T>& store, Rng& rng, const std::string& prefix, std::size_t dim) {
  init_layer_norm(store, prefix + ".lnq", dim);
  init_layer_norm(store, prefix + ".lnkv", dim);
  init_attention(store, rng, prefix + ".attn", dim);
  init_layer_norm(store, prefix + ".ln2", dim);
  init_feed_forward(store, rng, prefix + ".ffn", dim);
}

// ---------------------------------------------------------------------------
// forward blocks
// ---------------------------------------------------------------------------

template <class T>
Var<T> linear_layer(Session<T>& sess, const std::string& prefix, const Var<T>& x) {
  return linear(x, sess.param(prefix + ".w"), sess.param(prefix + ".b"));
}

template <class T>
Var<T> layer_norm_layer(Session<T>& sess, const std::string& prefix, const Var<T>& x) {
  return layer_norm(x, sess.param(prefix + ".g"), sess.param(prefix + ".b"));
}

// Multi-head scaled dot-product attention; queries from q_in, keys/values
// from kv_in. Self-attention passes the same stream twice.
template <class T>
Var<T> attention(Session<T>& sess, const std::string& prefix, const Var<T>& q_in, const Var<T>& kv_in,
                 std::size_t heads) {
  const std::size_t dim = q_in.value().cols();
  if (dim % heads != 0) throw ContractError("attention: dim not divisible by heads");
  const std::size_t head_dim = dim / heads;
  Var<T> q = linear_layer(sess, prefix + ".q", q_in);
  Var<T> k = linear_layer(sess, prefix + ".k", kv_in);
  Var<T> v = linear_layer(sess, prefix + ".v", kv_in);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<Var<T>> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * head_dim, head_dim);
    Var<T> kh = slice_cols(k, h * head_dim, head_dim);
    Var<T> vh = slice_cols(v, h * head_dim, head_dim);
    Var<T> weights = softmax_lastdim(scale(matmul(qh, transpose2d(kh)), inv_sqrt));
    per_head.push_back(matmul(weights, vh));
  }
  return linear_layer(sess, prefix + ".o", concat_cols(per_head));
}

template <class T>
Var<T> feed_forward(Session<T>& sess, const std::string& prefix, const Var<T>& x) {
  return linear_layer(sess, prefix + ".l1", gelu(linear_layer(sess, prefix + ".l0", x)));
}

// Pre-norm self-attention block.
template <class T>
Var<T> encoder_block(Session<T>& sess, const std::string& prefix, const Var<T>& x, std::size_t heads) {
  Var<T> normed = layer_norm_layer(sess, prefix + ".ln1", x);
  Var<T> y = add(x, attention(sess, prefix + ".attn", normed, normed, heads));
  return add(y, feed_forward(sess, prefix + ".ffn", layer_norm_layer(sess, prefix + ".ln2", y)));
}

// Pre-norm cross-attention block: queries attend to an external key/value
// stream, then a feed-forward. No self-attention among queries.
template <class T>
Var<T> cross_block(Session<T>& sess, const std::string& prefix, const Var<T>& queries, const Var<T>& kv,
                   std::size_t heads) {
  Var<T> qn = layer_norm_layer(sess, prefix + ".lnq", queries);
  Var<T> kvn = layer_norm_layer(sess, prefix + ".lnkv", kv);
  Var<T> y = add(queries, attention(sess, prefix + ".attn", qn, kvn, heads));
  return add(y, feed_forward(sess, prefix + ".ffn", layer_norm_layer(sess, prefix + ".ln2", y)));
}

}  // namespace rae
