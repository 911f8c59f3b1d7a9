#pragma once
// Minimal reverse-mode differentiation over rank-4 tensors.
//
// A Tape records every op of one forward pass.  Parameters enter the tape by
// reference: their values are read in place and their gradients accumulate
// directly into the owning Parameter, so several forward/backward passes can
// be summed before an optimizer step.

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dualshot/tensor.hpp"

namespace dualshot {

template <class T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;
    // Buffers (running statistics) are stored alongside weights but never updated by the optimizer.
    bool trainable = true;
};

// Named parameter collection.  Names are hierarchical paths ("fringe/ltb0/attn/q/weight");
// iteration order is lexicographic and therefore stable across runs.
template <class T>
class ParamStore {
  public:
    Parameter<T>& add(const std::string& name, Shape shape, bool trainable = true);
    Parameter<T>& get(const std::string& name);
    const Parameter<T>& get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    void zero_grad();
    // Trainable scalar count, optionally restricted to names not starting with any excluded prefix.
    std::size_t count(const std::vector<std::string>& excluded_prefixes = {}) const;

    const std::map<std::string, std::unique_ptr<Parameter<T>>>& items() const { return params_; }

  private:
    std::map<std::string, std::unique_ptr<Parameter<T>>> params_;
};

template <class T>
class Tape;

template <class T>
class Var {
  public:
    Var() = default;
    Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr && id_ >= 0; }
    int id() const { return id_; }
    Tape<T>& tape() const { return *tape_; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape; }
    bool needs_grad() const;

  private:
    Tape<T>* tape_ = nullptr;
    int id_ = -1;
};

template <class T>
class Tape {
  public:
    using Backward = std::function<void(Tape<T>&)>;

    // With grad disabled parameters enter as constants and no closures are kept (inference).
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // A leaf.  With requires_grad its gradient is kept after backward (input probes).
    Var<T> constant(Tensor<T> value, bool requires_grad = false);
    Var<T> param(Parameter<T>& p);
    // Records an op result.  The output needs a gradient iff any input does.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs);
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs);
    void set_backward(const Var<T>& v, Backward fn);

    const Tensor<T>& value(int id) const;
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    // Gradient buffer of a node, zero-allocated on first access.
    Tensor<T>& grad(int id);
    bool has_grad(int id) const;

    // Seeds d(out)/d(out) = 1 elementwise and propagates to every recorded input.
    void backward(const Var<T>& out);
    void backward(const Var<T>& out, const Tensor<T>& seed);

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Parameter<T>* param = nullptr;
        bool needs_grad = false;
        Backward backward;
    };
    // Deque so references to recorded values survive later records.
    std::deque<Node> nodes_;
    bool grad_enabled_ = true;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <class T>
bool Var<T>::needs_grad() const {
    return tape_->needs_grad(id_);
}

}  // namespace dualshot
