#pragma once

#include <string>
#include <vector>

#include "sre/image.hpp"

namespace sre {

struct Sample {
    RasterImage image;
    int label = 0;
    std::string domain;
};

struct LabeledSet {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
};

// Samples grouped per source domain, plus the shared label set.
struct MultiDomainDataset {
    std::vector<std::string> domains;
    std::vector<std::vector<Sample>> per_domain;  // parallel to `domains`
    std::vector<std::string> class_names;
};

}  // namespace sre
