#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rejshand/errors.hpp"

namespace rejshand {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major float64 array with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is how the
/// tape refers to op inputs and outputs. Values are treated as immutable once
/// an op has produced them; only parameters are updated in place (by the
/// optimizer), and only between tapes.
class Tensor {
   public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> data(shape_numel(shape), 0.0);
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> data(shape_numel(shape), value);
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(s_); }

    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t numel() const { return s_->value.size(); }

    std::span<const double> data() const { return s_->value; }
    // Direct write access; for parameters, initializers and the optimizer.
    std::span<double> mutable_data() { return s_->value; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return s_->value[0];
    }
    double operator[](std::size_t i) const { return s_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return s_->value[r * s_->shape.at(1) + c]; }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool flag) { s_->requires_grad = flag; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const double> grad() const { return s_->grad; }
    // Gradient buffers are not part of a tensor's value, so handles give
    // write access to them even when const.
    std::span<double> grad_mut() const {
        if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
        return s_->grad;
    }
    void zero_grad() const {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
    }
    void accumulate_grad(std::span<const double> g) const {
        auto dst = grad_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    // Fresh tensor with copied values and no gradient history.
    Tensor detach() const { return Tensor(s_->shape, s_->value, false); }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

   private:
    struct Storage {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Tensor(Shape shape, std::vector<double> data, bool requires_grad)
        : s_(std::make_shared<Storage>()) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        s_->shape = std::move(shape);
        s_->value = std::move(data);
        s_->requires_grad = requires_grad;
    }

    std::shared_ptr<Storage> s_;
};

/// Ordered record of differentiable ops, replayed in reverse by backward().
///
/// Nodes are appended as ops execute, so the list is topologically ordered by
/// construction. An op is recorded only when the tape is recording and at
/// least one input requires a gradient. A tape belongs to one thread.
class Tape {
   public:
    struct Node {
        std::string op;
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    bool recording() const noexcept { return recording_; }

    bool wants_grad(std::initializer_list<const Tensor*> inputs) const {
        if (!recording_) return false;
        return std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
    }

    void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output,
                std::function<void()> backward_fn) {
        output.set_requires_grad(true);
        nodes_.push_back(Node{std::string(op), std::move(inputs), output, std::move(backward_fn)});
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of tape-produced intermediates are reset first, then leaf
    /// gradients accumulate additively: replaying the same tape twice leaves
    /// exactly twice the leaf gradients. Callers zero parameter grads between
    /// optimizer steps.
    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
        }
        for (auto& node : nodes_) {
            auto g = node.output.grad_mut();
            std::fill(g.begin(), g.end(), 0.0);
        }
        Tensor seed = loss;
        const double one = 1.0;
        seed.accumulate_grad(std::span<const double>(&one, 1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    void clear() { nodes_.clear(); }

   private:
    bool recording_;
    std::vector<Node> nodes_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace rejshand
