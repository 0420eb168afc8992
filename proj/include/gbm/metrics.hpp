#pragma once

#include "gbm/types.hpp"

namespace gbm {

struct WeightedSeries {
    Vector x;
    Vector w;
    Eigen::Index k = 100;  // even bandwidth

    void validate() const;
};

// Window A_i = [max(1, i − k/2), min(n, i + k/2)]; weighted mean of x over each window.
Vector weighted_moving_average(const WeightedSeries& s);

// Unweighted moving average of v over the same windows.
Vector moving_average(const Vector& v, Eigen::Index k);

// sqrt(mean((w_i / w̄_i)² (x_i − x̄_i)²)).
double lrse(const WeightedSeries& s);

// median_i k·|x̄_{i+1} − x̄_i|; even-length medians average the two central values.
double wmad(const WeightedSeries& s);

double median(Vector v);

}  // namespace gbm
