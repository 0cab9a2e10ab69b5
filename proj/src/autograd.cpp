#include "cfreg/autograd.hpp"

namespace cfreg::ag {

Image<float>& Node::grad_buffer()
{
    if (grad.empty() && !value.empty()) {
        grad = Image<float>(value.channels(), value.dims());
    }
    return grad;
}

Var constant(Image<float> value)
{
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var parameter(Image<float> value)
{
    auto n = constant(std::move(value));
    n->requires_grad = true;
    return n;
}

void Tape::backward(const Var& root)
{
    root->grad_buffer().fill(1.0f);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backward && !n.grad.empty()) {
            n.backward(n.grad);
        }
    }
}

Var record(Context& ctx, Image<float> value, std::initializer_list<Var> inputs,
           std::function<void(const Image<float>&)> backward)
{
    auto out = std::make_shared<Node>();
    out->value = std::move(value);
    if (ctx.tape == nullptr) {
        return out;
    }
    bool any = false;
    for (const auto& in : inputs) {
        any = any || needs_grad(in);
    }
    if (!any) {
        return out;
    }
    out->requires_grad = true;
    out->backward = std::move(backward);
    ctx.tape->push(out);
    return out;
}

} // namespace cfreg::ag
