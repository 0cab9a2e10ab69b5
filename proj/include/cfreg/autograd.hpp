#pragma once

// Tape-based reverse-mode differentiation over float images.

#include "cfreg/image.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace cfreg::ag {

struct Node {
    Image<float> value;
    Image<float> grad; // empty until something flows back
    bool requires_grad = false;
    std::function<void(const Image<float>&)> backward;

    /// Zero-initialized gradient buffer shaped like value.
    Image<float>& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var constant(Image<float> value);
Var parameter(Image<float> value);

class Tape {
public:
    void push(const Var& v) { nodes_.push_back(v); }
    /// Seeds d(root)/d(root) = 1 and runs every recorded backward in reverse order.
    void backward(const Var& root);
    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Var> nodes_;
};

/// Without a tape, ops compute values only and keep no intermediates.
struct Context {
    Tape* tape = nullptr;
};

/// Output node for an op; the closure is kept only when gradients are needed.
Var record(Context& ctx, Image<float> value, std::initializer_list<Var> inputs,
           std::function<void(const Image<float>&)> backward);

inline bool needs_grad(const Var& v) { return v && v->requires_grad; }

} // namespace cfreg::ag
