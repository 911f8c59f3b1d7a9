#include "dualshot/autograd.hpp"

#include <algorithm>
#include <sstream>

namespace dualshot {

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[' << s[0] << ',' << s[1] << ',' << s[2] << ',' << s[3] << ']';
    return os.str();
}

template <class T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Shape shape, bool trainable) {
    if (params_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    p->trainable = trainable;
    auto& ref = *p;
    params_.emplace(name, std::move(p));
    return ref;
}

template <class T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *it->second;
}

template <class T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *it->second;
}

template <class T>
void ParamStore<T>::zero_grad() {
    for (auto& [_, p] : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
}

template <class T>
std::size_t ParamStore<T>::count(const std::vector<std::string>& excluded_prefixes) const {
    std::size_t total = 0;
    for (const auto& [name, p] : params_) {
        if (!p->trainable) continue;
        const bool skip = std::any_of(excluded_prefixes.begin(), excluded_prefixes.end(),
                                      [&](const std::string& pre) { return name.rfind(pre, 0) == 0; });
        if (!skip) total += p->value.size();
    }
    return total;
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <class T>
Var<T> Tape<T>::param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = p.trainable && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs) {
    Node n;
    n.value = std::move(value);
    for (const auto& v : inputs) {
        if (v.valid() && nodes_[static_cast<std::size_t>(v.id())].needs_grad) n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs) {
    Node n;
    n.value = std::move(value);
    for (const auto& v : inputs) {
        if (v.valid() && nodes_[static_cast<std::size_t>(v.id())].needs_grad) n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <class T>
void Tape<T>::set_backward(const Var<T>& v, Backward fn) {
    nodes_[static_cast<std::size_t>(v.id())].backward = std::move(fn);
}

template <class T>
const Tensor<T>& Tape<T>::value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param != nullptr ? n.param->value : n.value;
}

template <class T>
Tensor<T>& Tape<T>::grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.param != nullptr) {
        if (n.param->grad.shape != n.param->value.shape) n.param->grad = Tensor<T>(n.param->value.shape);
        return n.param->grad;
    }
    if (n.grad.shape != n.value.shape) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
}

template <class T>
bool Tape<T>::has_grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param != nullptr || !n.grad.empty();
}

template <class T>
void Tape<T>::backward(const Var<T>& out) {
    Tensor<T> seed(value(out.id()).shape, T(1));
    backward(out, seed);
}

template <class T>
void Tape<T>::backward(const Var<T>& out, const Tensor<T>& seed) {
    if (seed.shape != value(out.id()).shape) throw ShapeError("backward seed shape mismatch");
    auto& g = grad(out.id());
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed.data[i];
    for (int id = out.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
        n.backward(*this);
        // Intermediate gradients are no longer needed once propagated.
        n.grad = Tensor<T>();
    }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace dualshot
