#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Violated call contract (non-scalar loss, zero-length input, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One recorded value in the define-by-run graph. Leaves have no inputs;
/// every other node carries the rule that pushes its grad into its inputs.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    std::string_view op = "leaf";

    std::vector<double>& grad_buffer();
};

/// Dense row-major float64 array. Copies share storage; values of non-leaf
/// tensors never change after construction.
///
/// Rank 0 and rank 1 tensors are viewed as a single row when an operation
/// needs a matrix (rows() == 1).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor identity(std::size_t n);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return node_->value; }
    /// Only leaves may be written (optimizer updates, checkpoint loads).
    std::span<double> mutable_data();
    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool is_leaf() const { return node_->inputs.empty() && !node_->backward; }

    /// Gradient buffer; a zero vector when nothing has been accumulated.
    std::vector<double> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    void backward() const;

    /// Leaf copy of the values, detached from any graph.
    Tensor clone(bool requires_grad = false) const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& handle() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Topologically ordered view of the graph reachable from a root.
struct Graph {
    std::vector<Node*> nodes;

    static Graph collect(const Tensor& root);
    bool is_topological() const;
};

/// Builds a result node; inputs and the backward rule are dropped when no
/// input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, std::string_view op);

}  // namespace peftlab
