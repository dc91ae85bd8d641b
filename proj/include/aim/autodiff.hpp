// autodiff.hpp — tape-based reverse-mode autodiff.
//
// A Graph owns a Tape of nodes appended in forward (topological) order; each
// node carries its value, a lazily-allocated gradient, and a backward closure
// that scatters the node's gradient into its parents. backward(root) seeds
// the root with 1 and walks the tape in reverse — only nodes whose gradient
// was touched are processed, so eval-only graphs pay nothing.
//
// Everything is templated on the scalar type: float is the production path,
// double instantiations drive the finite-difference gradient checks.
//
// Parameters are plain value+metadata structs owned by the modules; binding
// one into a Graph creates (at most) one leaf node per forward, and the
// Graph keeps the (Param*, node) pairs so the optimizer can read gradients
// after backward.

#ifndef AIM_AUTODIFF_HPP
#define AIM_AUTODIFF_HPP

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aim/common.hpp"
#include "aim/rng.hpp"
#include "aim/tensor.hpp"

namespace aim {

// Two learning-rate groups: the pretrained-style backbone vs everything the
// masking pathway adds (transforms, estimators, classifier heads).
enum class ParamGroup { kBackbone, kTopdown };

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    ParamGroup group = ParamGroup::kTopdown;
    bool decay = true;  // weight decay applies (off for biases and norm affine)
};

template <typename T>
class Tape {
  public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // undefined until someone accumulates into it
        std::function<void(Tape&)> backward;
        bool needs_grad = false;
    };

    int push(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward = nullptr) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    void set_backward(int id, std::function<void(Tape&)> fn) {
        nodes_[size_t(id)].backward = std::move(fn);
    }

    const Tensor<T>& val(int id) const { return nodes_[size_t(id)].value; }
    Tensor<T>& val(int id) { return nodes_[size_t(id)].value; }

    bool needs_grad(int id) const { return nodes_[size_t(id)].needs_grad; }

    bool has_grad(int id) const { return nodes_[size_t(id)].grad.defined(); }

    // Gradient accumulator for a node; allocated zeroed on first touch.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[size_t(id)];
        if (!n.grad.defined()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    // Reverse sweep from a scalar root. Clears previous gradients so a tape
    // can be re-differentiated (eval-time attribution after a loss pass).
    void backward(int root) {
        AIM_CHECK(root >= 0 && root < int(nodes_.size()), DimError,
                  "backward: node " << root << " out of range");
        AIM_CHECK(val(root).size() == 1, DimError,
                  "backward: root must be a scalar, got shape " << shape_str(val(root).shape()));
        for (auto& n : nodes_) {
            if (n.grad.defined()) n.grad.zero();
        }
        grad(root)[0] = T(1);
        for (int i = root; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.grad.defined() && n.backward) n.backward(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    // A deque so references to node values stay valid across push():
    // every op holds `const Tensor<T>&` into the tape while appending
    // its output node and building the backward closure.
    std::deque<Node> nodes_;
};

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool defined() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& val() const { return tape->val(id); }
    Tensor<T>& grad() const { return tape->grad(id); }
};

// One forward pass worth of state: the tape, the mode, the RNG used by
// stochastic ops, and the parameter bindings made along the way.
template <typename T>
struct Graph {
    Tape<T> tape;
    Mode mode = Mode::kEval;
    Rng* rng = nullptr;
    std::vector<std::pair<Param<T>*, int>> bound;

    Var<T> input(Tensor<T> x, bool needs_grad = false) {
        return {&tape, tape.push(std::move(x), needs_grad)};
    }

    Var<T> constant(Tensor<T> x) { return input(std::move(x), false); }

    // Bind a parameter as a leaf. A parameter used twice in one forward gets
    // one node (gradients from both uses accumulate there).
    Var<T> param(Param<T>& p) {
        for (const auto& [ptr, id] : bound) {
            if (ptr == &p) return {&tape, id};
        }
        const int id = tape.push(p.value, /*needs_grad=*/true);
        bound.emplace_back(&p, id);
        return {&tape, id};
    }

    // Gradient of a bound parameter after backward() (zeros if untouched).
    Tensor<T> param_grad(const Param<T>& p) {
        for (const auto& [ptr, id] : bound) {
            if (ptr == &p) {
                return tape.has_grad(id) ? tape.grad(id) : Tensor<T>::zeros(p.value.shape());
            }
        }
        AIM_THROW(ConfigError, "param_grad: parameter '" << p.name << "' not bound in this graph");
    }
};

}  // namespace aim

#endif  // AIM_AUTODIFF_HPP
