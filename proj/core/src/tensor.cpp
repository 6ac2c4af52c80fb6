#include "peftlab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace peftlab {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    Tensor t(std::move(node));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    std::vector<double> values;
    std::size_t width = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
        if (row.size() != width) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return from({rows.size(), width}, std::move(values), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return from({values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return from({n, n}, std::move(v));
}

std::size_t Tensor::rows() const {
    const auto& s = node_->shape;
    return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
    const auto& s = node_->shape;
    return s.empty() ? 1 : s.back();
}

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw ContractError("only leaf tensors can be written in place");
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on && is_leaf()) node_->grad_buffer();
    if (!on && is_leaf()) node_->grad.clear();
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
    return from(shape(), node_->value, requires_grad);
}

Graph Graph::collect(const Tensor& root) {
    Graph g;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS so deep graphs do not exhaust the stack.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            g.nodes.push_back(node);
            stack.pop_back();
        }
    }
    return g;
}

bool Graph::is_topological() const {
    std::unordered_map<const Node*, std::size_t> pos;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!pos.emplace(nodes[i], i).second) return false;
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (const auto& in : nodes[i]->inputs) {
            auto it = pos.find(in.get());
            if (it != pos.end() && it->second >= i) return false;
        }
    }
    return true;
}

void Tensor::backward() const {
    if (size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) return;
    Graph g = Graph::collect(*this);
    node_->grad_buffer()[0] += 1.0;
    for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Interior grads are only needed during the sweep.
    for (Node* n : g.nodes) {
        if (n->backward) n->grad.clear();
    }
}

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, std::string_view op) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.handle());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace peftlab
