#include "skewsplit/optim.h"

#include <string>

#include "skewsplit/errors.h"

namespace skewsplit {

void SgdStep(const std::vector<Tensor*>& params, double lr,
             double weight_decay) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw Error("sgd_step: parameter " + std::to_string(i) + " " +
                  ShapeToString(params[i]->shape()) + " has no gradient");
    }
  }
  for (Tensor* p : params) {
    std::span<double> values = p->mutable_data();
    std::span<const double> grad = p->grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      values[j] -= lr * (grad[j] + weight_decay * values[j]);
    }
    p->ZeroGrad();
  }
}

}  // namespace skewsplit
