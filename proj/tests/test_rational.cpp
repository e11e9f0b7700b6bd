#include "doctest.h"

#include "barstream/rational.hpp"

using barstream::Rational;

TEST_CASE("rational arithmetic stays in lowest terms") {
    Rational a{2, 8};
    CHECK(a.num == 1);
    CHECK(a.den == 4);

    Rational b = Rational{1, 6} + Rational{1, 3};
    CHECK(b == Rational{1, 2});

    Rational c = Rational{3, 4} * Rational{2, 3};
    CHECK(c == Rational{1, 2});

    Rational d = Rational{7, 16} - Rational{3, 16};
    CHECK(d == Rational{1, 4});

    CHECK(Rational{-2, -4} == Rational{1, 2});
    CHECK(Rational{2, -4} == Rational{-1, 2});
}

TEST_CASE("rational comparison is exact") {
    CHECK(Rational{1, 3} < Rational{1, 2});
    CHECK(Rational{2, 4} == Rational{1, 2});
    CHECK(Rational{3, 4} >= Rational{3, 4});
    CHECK(Rational{-1, 2} < Rational{0});
}

TEST_CASE("rational rejects zero denominators") {
    CHECK_THROWS_AS((Rational{1, 0}), barstream::Error);
    CHECK_THROWS_AS((Rational{1, 2} / Rational{0}), barstream::Error);
}

TEST_CASE("rational prints as a fraction") {
    CHECK(Rational{3, 8}.str() == "3/8");
    CHECK(Rational{4}.str() == "4");
    CHECK(Rational{6, 3}.str() == "2");
}
