#pragma once

// One finite-difference case per differentiable op. Each loss contracts the op
// output with a fixed random weighting so every output entry contributes.
// Shared by the unit suite and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "rejshand/ops.hpp"
#include "support/gradcheck.hpp"

namespace rejshand::testing {

struct OpCase {
    std::string name;
    std::function<GradCheckResult(Rng&)> run;
};

inline std::vector<OpCase> op_gradient_cases() {
    auto weighted = [](Tape& tape, const Tensor& y, const Tensor& r) { return sum(tape, mul(tape, y, r)); };
    auto t = [](Rng& rng, Shape s) { return random_tensor(std::move(s), rng); };
    std::vector<OpCase> cases;
    cases.push_back({"matmul", [=](Rng& rng) {
                         Tensor a = t(rng, {3, 4}), b = t(rng, {4, 5}), r = t(rng, {3, 5});
                         return gradcheck([&](Tape& tp) { return weighted(tp, matmul(tp, a, b), r); }, {{"a", a}, {"b", b}});
                     }});
    cases.push_back({"linear", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), w = t(rng, {4, 5}), b = t(rng, {5}), r = t(rng, {3, 5});
                         return gradcheck([&](Tape& tp) { return weighted(tp, linear(tp, x, w, b), r); },
                                          {{"x", x}, {"w", w}, {"b", b}});
                     }});
    cases.push_back({"conv2d", [=](Rng& rng) {
                         Tensor x = t(rng, {2, 6, 5}), w = t(rng, {3, 2, 3, 3}), b = t(rng, {3}), r = t(rng, {3, 3, 3});
                         return gradcheck([&](Tape& tp) { return weighted(tp, conv2d(tp, x, w, b, 2, 1), r); },
                                          {{"x", x}, {"w", w}, {"b", b}});
                     }});
    cases.push_back({"conv_transpose2d", [=](Rng& rng) {
                         Tensor x = t(rng, {2, 3, 3}), w = t(rng, {2, 3, 2, 2}), b = t(rng, {3}), r = t(rng, {3, 6, 6});
                         return gradcheck([&](Tape& tp) { return weighted(tp, conv_transpose2d(tp, x, w, b, 2), r); },
                                          {{"x", x}, {"w", w}, {"b", b}});
                     }});
    cases.push_back({"conv1d", [=](Rng& rng) {
                         Tensor x = t(rng, {5, 4}), w = t(rng, {4, 3}), b = t(rng, {4}), r = t(rng, {5, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, conv1d(tp, x, w, b, 1), r); },
                                          {{"x", x}, {"w", w}, {"b", b}});
                     }});
    cases.push_back({"softmax_rows", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, softmax(tp, x, 1), r); }, {{"x", x}});
                     }});
    cases.push_back({"softmax_cols", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, softmax(tp, x, 0), r); }, {{"x", x}});
                     }});
    cases.push_back({"layer_norm", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), g = t(rng, {4}), s = t(rng, {4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, layer_norm(tp, x, g, s), r); },
                                          {{"x", x}, {"g", g}, {"s", s}});
                     }});
    cases.push_back({"grid_sample_bilinear", [=](Rng& rng) {
                         Tensor f = t(rng, {3, 4, 5}), c = random_tensor({6, 2}, rng, -0.95, 0.95), r = t(rng, {6, 3});
                         return gradcheck([&](Tape& tp) { return weighted(tp, grid_sample_bilinear(tp, f, c), r); },
                                          {{"f", f}, {"c", c}});
                     }});
    cases.push_back({"sigmoid", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, sigmoid(tp, x), r); }, {{"x", x}});
                     }});
    cases.push_back({"relu", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, relu(tp, x), r); }, {{"x", x}});
                     }});
    cases.push_back({"abs", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, abs(tp, x), r); }, {{"x", x}});
                     }});
    cases.push_back({"mul", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, mul(tp, x, x), r); }, {{"x", x}});
                     }});
    cases.push_back({"scalar_broadcast_sub", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), s = t(rng, {1}), r = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, sub(tp, mul(tp, x, s), r), r); },
                                          {{"x", x}, {"s", s}});
                     }});
    cases.push_back({"row_norms", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4});
                         return gradcheck([&](Tape& tp) { return sum(tp, row_norms(tp, x)); }, {{"x", x}});
                     }});
    cases.push_back({"transpose", [=](Rng& rng) {
                         Tensor x = t(rng, {4, 5}), r = t(rng, {5, 4});
                         return gradcheck([&](Tape& tp) { return weighted(tp, transpose(tp, x), r); }, {{"x", x}});
                     }});
    cases.push_back({"slice_concat_gather", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4});
                         return gradcheck(
                             [&](Tape& tp) {
                                 Tensor cat = concat_cols(tp, {slice_cols(tp, x, 1, 2), x});
                                 Tensor rows = concat_rows(tp, {gather_rows(tp, cat, {2, 0, 2}), cat});
                                 return sum(tp, mul(tp, rows, rows));
                             },
                             {{"x", x}});
                     }});
    cases.push_back({"reshape", [=](Rng& rng) {
                         Tensor x = t(rng, {3, 4}), r = t(rng, {4, 3});
                         return gradcheck([&](Tape& tp) { return weighted(tp, reshape(tp, x, {4, 3}), r); }, {{"x", x}});
                     }});
    return cases;
}

}  // namespace rejshand::testing
