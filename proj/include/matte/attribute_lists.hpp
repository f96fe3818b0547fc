// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_ATTRIBUTE_LISTS_HPP
#define MATTE_ATTRIBUTE_LISTS_HPP

#include <string>
#include <vector>

namespace matte {

// Attribute vocabularies shared by training (style pool) and evaluation sweeps.
struct AttributeLists {
    std::vector<std::string> objects;
    std::vector<std::string> colors;
    std::vector<std::string> styles_eval;
    std::vector<std::string> styles_train;
};

inline const AttributeLists& attribute_lists() {
    static const AttributeLists lists{
        {"chair", "dog", "book", "elephant", "guitar", "pillow", "rabbit", "umbrella", "yacht", "house", "cube",
         "sphere", "car"},
        {"black", "blue", "brown", "gray", "green", "orange", "pink", "purple", "red", "white", "yellow"},
        {"watercolor", "oil painting", "vector art", "pop art style", "3D rendering", "impressionism picture",
         "graffiti"},
        {"oil painting", "vector art", "pop art style", "3D rendering", "impressionism picture", "graffiti",
         "fuzzy", "shiny", "bright", "fluffy", "sparkly", "dull", "smooth", "rough", "jagged", "striped",
         "painting", "retro", "vintage", "modern", "bohemian", "industrial", "rustic", "classic", "contemporary",
         "futuristic"},
    };
    return lists;
}

}  // namespace matte

#endif  // MATTE_ATTRIBUTE_LISTS_HPP
